"""Acceptance bookkeeping: one PASS/FAIL/SKIP line per criterion at the end of the run."""

import pytest

TITLES = {
    1: "gradient correctness",
    2: "convolution oracle",
    3: "architecture audit",
    4: "slimming property",
    5: "dilation-group validator",
    6: "spectral oracle",
    7: "schedule and optimizer",
    8: "pipeline determinism and coverage",
    9: "learning smoke test",
    10: "full-scale protocol (optional)",
    11: "checkpoint round-trip",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        state = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        prev = _outcomes.get(n)
        # any failure wins, then any pass over skips
        if prev is None or state == "FAIL" or (state == "PASS" and prev == "SKIP"):
            _outcomes[n] = state


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        terminalreporter.write_line(f"criterion {n:2d} {_outcomes[n]:4s} {TITLES.get(n, '')}")
