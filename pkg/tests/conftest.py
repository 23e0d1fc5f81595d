"""Shared fixtures and the acceptance-criteria summary."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"

CRITERIA = {
    1: "Somers' Dxy equals brute-force pair enumeration",
    2: "threshold/class round trip and expected index",
    3: "full-model gradients match central differences",
    4: "planted-signal learnability at 24h",
    5: "calibration slope recovery",
    6: "transition cutoff fidelity",
    7: "TimeSHAP axioms and exact-vs-sampled agreement",
    8: "BBC-CV sanity",
    9: "stratified partitioning",
    10: "end-to-end CLI determinism",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.failed or (report.when == "setup" and report.skipped):
        _outcomes.setdefault(crit, []).append(report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, desc in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {desc}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
