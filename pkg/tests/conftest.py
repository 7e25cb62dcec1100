import time
from pathlib import Path

import pytest

from tryonkit.cli import main

SUITE_BUDGET_S = 300.0
_started = time.perf_counter()
_criteria: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria.append((marker.args[0], "PASS" if report.passed else "FAIL"))


def _elapsed() -> float:
    return time.perf_counter() - _started


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria:
        terminalreporter.write_line(f"[{status}] {name}")
    elapsed = _elapsed()
    status = "PASS" if elapsed < SUITE_BUDGET_S else "FAIL"
    terminalreporter.write_line(f"[{status}] full suite wall time {elapsed:.1f} s (budget {SUITE_BUDGET_S:.0f} s)")


def pytest_sessionfinish(session, exitstatus):
    if _criteria and _elapsed() >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1


@pytest.fixture(scope="session")
def selftest_runs(tmp_path_factory) -> tuple[Path, Path]:
    """Two selftest runs with the same seed."""
    runs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        assert main(["selftest", "--out", str(out), "--seed", "0"]) == 0
        runs.append(out)
    return runs[0], runs[1]
