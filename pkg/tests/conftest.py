import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from _report import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
