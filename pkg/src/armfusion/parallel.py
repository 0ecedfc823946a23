import os


def worker_count() -> int:
    """Worker cap from ``DML_THREADS``; defaults to the logical core count."""
    raw = os.environ.get("DML_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"DML_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
