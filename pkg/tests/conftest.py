from __future__ import annotations

import pytest

_RESULTS: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _RESULTS[number] = (status, title, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, duration = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  ({duration:.2f}s)")
