import pytest

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_report():
    """Append-only list of acceptance verdict lines, echoed in the terminal summary."""

    def report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        _CRITERIA.append(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
