import pytest

_LINES = []


@pytest.fixture
def report():
    """``report(criterion, ok, detail)`` records one PASS/FAIL line for the summary."""

    def record(criterion, ok, detail=""):
        line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
