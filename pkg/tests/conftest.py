import verdicts


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(verdicts.LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
