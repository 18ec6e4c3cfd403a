import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPT_RESULTS = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance" not in report.nodeid:
        return
    status = "PASS" if report.passed else "FAIL"
    _ACCEPT_RESULTS.append((report.nodeid.split("::")[-1], status))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPT_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name, status in _ACCEPT_RESULTS:
        terminalreporter.write_line(f"  [{status}] {name}")
