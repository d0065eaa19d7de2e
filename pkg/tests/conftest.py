"""Collects ``@pytest.mark.acceptance(n, title)`` outcomes and prints one
PASS/FAIL line per criterion at the end of the run."""
from __future__ import annotations

_criteria: dict[int, str] = {}
_nodes: dict[str, int] = {}
_failed: set[int] = set()
_seen: set[int] = set()


def pytest_collection_modifyitems(config, items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is None:
            continue
        number, title = marker.args
        _criteria[number] = title
        _nodes[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _nodes.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _seen.add(number)
    if report.failed or report.skipped:
        _failed.add(number)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        if number not in _seen:
            status = "NOT RUN"
        else:
            status = "FAIL" if number in _failed else "PASS"
        terminalreporter.write_line(f"ACCEPTANCE {number} {status}: {_criteria[number]}")
