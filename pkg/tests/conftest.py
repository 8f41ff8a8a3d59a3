def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for verdict in sorted(VERDICTS, key=lambda v: v.criterion):
        terminalreporter.write_line(verdict.line())
