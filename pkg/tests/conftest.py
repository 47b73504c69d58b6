"""Repeats acceptance verdict lines after the run, outside stdout capture."""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance") \
        or sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None) if mod else None
    if not verdicts:
        return
    terminalreporter.write_sep("-", "acceptance verdicts")
    for line in verdicts:
        terminalreporter.write_line(line)
