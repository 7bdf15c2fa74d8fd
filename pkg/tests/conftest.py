import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: verdict(number, passed, detail)."""

    def record(number, passed, detail):
        ACCEPTANCE[str(number)] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
