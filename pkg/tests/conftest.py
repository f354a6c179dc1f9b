import pytest

_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the terminal summary."""

    def add(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _REPORT.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
