import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    """Record one summary line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _LINES.append(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
