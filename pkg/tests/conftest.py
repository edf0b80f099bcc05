import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_registry import LINES  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
