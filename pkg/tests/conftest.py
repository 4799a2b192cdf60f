from __future__ import annotations

import time

import pytest

from cvsim import sweep

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []
TRACE_BUILD_SECONDS: list[float] = []


@pytest.fixture(scope="session")
def traces_512():
    """(compressed, uncompressed) n=512, vlen=16384 traces, built once."""
    t0 = time.perf_counter()
    pair = sweep.TRACES.pair(512, 16384)
    TRACE_BUILD_SECONDS.append(time.perf_counter() - t0)
    return pair


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
