import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict, then assert it."""

    def record(number, title, passed, detail):
        tag = "PASS" if passed else "FAIL"
        request.config.stash[_LINES][number] = f"[{tag}] criterion {number:2d} {title}: {detail}"
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
