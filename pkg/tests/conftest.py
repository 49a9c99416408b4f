import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion_report():
    """``report(n, ok, detail)`` records one acceptance line for the terminal summary."""

    def report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append((n, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
