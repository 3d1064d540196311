import pytest

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line; the summary prints them all after the run."""

    def _record(criterion, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
