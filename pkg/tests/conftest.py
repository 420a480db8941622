"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if call.when == "call":
        entry["tests"] += 1
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["ok"] and r["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {r['title']}")
