"""Per-criterion summary for the acceptance suite.

Tests marked ``criterion(n, name)`` are collected here and reported as one
pass/fail line each at the end of the run.
"""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, name = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.failed:
        _RESULTS[n] = (name, "FAIL", detail)
    elif rep.skipped:
        _RESULTS.setdefault(n, (name, "SKIP", detail))
    elif rep.when == "call":
        _RESULTS[n] = (name, "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        name, status, detail = _RESULTS[n]
        line = f"criterion {n} [{name}]: {status}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
