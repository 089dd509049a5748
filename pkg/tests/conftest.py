import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report_line():
    """Record a one-line verdict that is echoed in the terminal summary."""
    def record(text: str) -> None:
        _LINES.append(text)
        print(text)
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
