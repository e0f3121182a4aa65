import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    """Acceptance tests call ``record(number, passed, detail)`` before asserting."""

    def _record(number, passed, detail=""):
        ACCEPTANCE[number] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
