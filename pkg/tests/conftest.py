import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


class _Criterion:
    def __init__(self, results):
        self._results = results
        self.number = None
        self.title = None
        self.done = False

    def open(self, number, title):
        self.number, self.title = number, title

    def record(self, passed, detail):
        self._results.append((self.number, self.title, bool(passed), detail))
        self.done = True
        return passed


@pytest.fixture
def criterion(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    entry = _Criterion(request.config.stash[_RESULTS])
    yield entry
    if entry.number is not None and not entry.done:
        entry.record(False, "raised before reaching its verdict")


def pytest_terminal_summary(terminalreporter, config):
    results = sorted(config.stash[_RESULTS], key=lambda r: r[0])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in results:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
