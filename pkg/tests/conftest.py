import re
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str]] = {}


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    failed = report.failed
    if report.when == "call" or failed:
        prev = _results.get(n, ("PASS", m.group(2)))[0]
        status = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _results[n] = (status, m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {name.replace('_', ' ')}")
