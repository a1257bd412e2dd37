import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
