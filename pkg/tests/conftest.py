import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, ok, detail)``."""
    lines = request.config.stash[_LINES]

    def record(number: int, ok: bool, detail: str):
        lines.append((number, "PASS" if ok else "FAIL", detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
