"""Little-endian binary containers.

* ``DMLT`` - one tensor per file (trajectory images, states, actions).
* ``DMLW`` - a list of tensors followed by optional tagged sections
  (``tag[4] u32 length payload``); forests live in a ``TREE`` section.
* ``DMLF`` - precomputed feature vectors keyed by sample id.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(buf)})")
    return buf


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def _read_header(f: BinaryIO, magic: bytes) -> int:
    got = _read_exact(f, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _unpack(f, "<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    return version


def _write_tensor_body(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def _read_tensor_body(f: BinaryIO) -> np.ndarray:
    (rank,) = _unpack(f, "<I")
    shape = _unpack(f, f"<{rank}I") if rank else ()
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype=_F32)
    return data.astype(np.float32).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(b"DMLT" + struct.pack("<H", FORMAT_VERSION))
        _write_tensor_body(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        _read_header(f, b"DMLT")
        return _read_tensor_body(f)


def save_checkpoint(path, tensors: Iterable[np.ndarray], sections: Mapping[bytes, bytes] | None = None) -> None:
    tensors = list(tensors)
    with open(path, "wb") as f:
        f.write(b"DMLW" + struct.pack("<HI", FORMAT_VERSION, len(tensors)))
        for t in tensors:
            _write_tensor_body(f, t)
        for tag, payload in (sections or {}).items():
            if len(tag) != 4:
                raise FormatError(f"section tag must be 4 bytes, got {tag!r}")
            f.write(tag + struct.pack("<I", len(payload)) + payload)


def load_checkpoint(path) -> tuple[list[np.ndarray], dict[bytes, bytes]]:
    with open(path, "rb") as f:
        _read_header(f, b"DMLW")
        (count,) = _unpack(f, "<I")
        tensors = [_read_tensor_body(f) for _ in range(count)]
        sections = {}
        while True:
            tag = f.read(4)
            if not tag:
                break
            if len(tag) != 4:
                raise FormatError("truncated section tag")
            (length,) = _unpack(f, "<I")
            sections[tag] = _read_exact(f, length)
    return tensors, sections


def save_features(path, features: Mapping[str, np.ndarray]) -> None:
    items = list(features.items())
    dims = {np.asarray(v).shape for _, v in items}
    if len(dims) > 1:
        raise FormatError(f"feature vectors have differing shapes {sorted(dims)}")
    d = int(np.asarray(items[0][1]).size) if items else 0
    with open(path, "wb") as f:
        f.write(b"DMLF" + struct.pack("<HII", FORMAT_VERSION, d, len(items)))
        for key, vec in items:
            kb = key.encode("utf-8")
            f.write(struct.pack("<I", len(kb)) + kb)
            f.write(np.ascontiguousarray(vec, dtype=_F32).reshape(d).tobytes())


def load_features(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        _read_header(f, b"DMLF")
        d, count = _unpack(f, "<II")
        out = {}
        for _ in range(count):
            (klen,) = _unpack(f, "<I")
            key = _read_exact(f, klen).decode("utf-8")
            out[key] = np.frombuffer(_read_exact(f, 4 * d), dtype=_F32).astype(np.float32)
    return d, out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
