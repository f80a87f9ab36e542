import criteria


def pytest_terminal_summary(terminalreporter):
    if not criteria.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(criteria.LINES, key=lambda n: (int(str(n).rstrip('b')), str(n))):
        terminalreporter.write_line(criteria.LINES[n])
