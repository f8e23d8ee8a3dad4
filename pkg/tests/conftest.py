import re

import acceptance_log

_outcomes = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        _outcomes[n] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        detail = acceptance_log.details.get(n, "")
        line = f"[{_outcomes[n]}] criterion {n:2d}: {acceptance_log.TITLES.get(n, '?')}"
        terminalreporter.write_line(f"{line}  {detail}".rstrip())
