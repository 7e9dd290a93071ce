import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Store one pass/fail line per acceptance criterion and fail the test when it does not hold."""

    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
