"""Pytest hooks: surface the acceptance verdict lines in the run summary."""


def pytest_terminal_summary(terminalreporter):
    try:
        import support
    except ImportError:
        return
    lines = getattr(support, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
