"""Acceptance reporting: one PASS/FAIL line per numbered criterion."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion check")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    num, title = marker
    rec = _RESULTS.setdefault(num, {"title": title, "ok": True, "ran": False, "note": ""})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        rec["ran"] = True
        if report.outcome != "passed":
            rec["ok"] = False
            msg = str(report.longrepr).strip().splitlines()
            rec["note"] = msg[-1][:160] if msg else report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result()._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        rec = _RESULTS[num]
        if not rec["ran"]:
            status = "NOT RUN"
        else:
            status = "PASS" if rec["ok"] else "FAIL"
        line = f"criterion {num:2d} {status:4s}  {rec['title']}"
        if status == "FAIL" and rec["note"]:
            line += f"  [{rec['note']}]"
        tr.write_line(line)
