import pytest

_ACCEPT = pytest.StashKey[dict]()


@pytest.fixture
def report(request):
    """``report(n, ok, detail)`` records one acceptance line for the run summary."""
    lines = request.config.stash.setdefault(_ACCEPT, {})

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPT, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
