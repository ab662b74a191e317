import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdicts():
    """Acceptance criteria append ``(id, passed, detail)`` here; summarised at the end."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(_VERDICTS, key=lambda v: int(v[0][1:])):
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
