import sys


def pytest_terminal_summary(terminalreporter):
    """Replay the acceptance PASS/FAIL lines after the run, past capture."""
    mod = (sys.modules.get("tests.test_acceptance")
           or sys.modules.get("test_acceptance"))
    lines = getattr(mod, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance report")
        for line in lines:
            terminalreporter.write_line(line)
