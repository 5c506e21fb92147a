import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the boolean so tests can ``assert verdict(...)``."""

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(line)
