import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import verdicts  # noqa: E402

SUITE_BUDGET_S = 600.0
_start = time.perf_counter()
_suite_line = []


@pytest.hookimpl(tryfirst=True)
def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _start
    ok = elapsed < SUITE_BUDGET_S
    _suite_line.append(f"[{'PASS' if ok else 'FAIL'}] full suite runtime: {elapsed:.1f} s for "
                       f"{session.testscollected} tests (limit {SUITE_BUDGET_S:.0f} s, single process)")
    if not ok and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not verdicts.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in verdicts.RESULTS + _suite_line:
        terminalreporter.write_line(line)
