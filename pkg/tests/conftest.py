import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _RESULTS[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[n])
