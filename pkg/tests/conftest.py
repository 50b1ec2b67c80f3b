"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

ACCEPTANCE_PREFIX = "tests/test_acceptance.py::test_criterion_"

_results = {}


def pytest_runtest_logreport(report):
    if not report.nodeid.startswith(ACCEPTANCE_PREFIX):
        return
    name = report.nodeid[len(ACCEPTANCE_PREFIX):]
    if report.when == "call" or report.failed:
        _results[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results):
        number, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(number):2d} {_results[name]}  {label.replace('_', ' ')}")
