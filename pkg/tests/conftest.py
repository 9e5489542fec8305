"""Per-criterion pass/fail summary for the acceptance suite."""
from __future__ import annotations

import pytest

CRITERIA = {
    1: "Lambert W kernel accuracy and speed",
    2: "closed-form prices are optimal; objective concave in probabilities",
    3: "probabilities normalize; compensation/probability bijection",
    4: "value-network gradients and permutation invariance",
    5: "matching oracle equals exhaustive enumeration",
    6: "no policy beats the full-information value",
    7: "simulated choices follow logit probabilities",
    8: "MNL recovery from randomized offers",
    9: "Scenario I.1 directional reproduction",
    10: "Scenario II multi-group vs pooled MNL",
    11: "byte-identical reruns",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status:<7} {text}")
