"""Collects ``@pytest.mark.acceptance("ACn ...")`` outcomes and prints one line per criterion."""
from __future__ import annotations

from collections import OrderedDict

import pytest

_RESULTS: "OrderedDict[str, bool]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): test belongs to an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _RESULTS[label] = _RESULTS.get(label, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(f"{'PASS' if _RESULTS[label] else 'FAIL'} {label}")
