import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line, print it unbuffered and fail the test if it did not pass."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        request.config.stash.setdefault(_RESULTS, {})[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
