"""Shared pytest hooks: the acceptance suite's one-line-per-criterion report."""

CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
