import time

import numpy as np
import pytest

from distcbf.cli_io import default_params
from distcbf.runtime import run

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def shipped():
    return default_params()


_FULL_RUNS: dict = {}


@pytest.fixture(scope="session")
def full_run(shipped):
    """Full-horizon closed-loop run of the shipped scenario, computed once per mode.

    Returns ``(result, seconds)``; every slow step is recorded.
    """

    def get(mode: str):
        if mode not in _FULL_RUNS:
            t0 = time.perf_counter()
            result = run(shipped, mode)
            _FULL_RUNS[mode] = (result, time.perf_counter() - t0)
        return _FULL_RUNS[mode]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome for the end-of-run report."""

    def record(number: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}  ({detail})")
