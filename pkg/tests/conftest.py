"""Collects acceptance outcomes and prints one line per criterion at the end."""

import re

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    entry = _CRITERIA.setdefault(num, {"outcome": "passed", "details": []})
    if report.when == "call" or report.failed:
        if report.failed:
            entry["outcome"] = "failed"
        elif report.skipped and entry["outcome"] == "passed":
            entry["outcome"] = "skipped"
        for key, value in report.user_properties:
            if key == "detail" and value not in entry["details"]:
                entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[entry["outcome"]]
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {num:>2}: {status}  {detail}".rstrip())
