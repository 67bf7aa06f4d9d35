import pytest

_RESULTS = pytest.StashKey[dict]()


class Criterion:
    def __init__(self, store, number, name):
        self.store, self.number, self.name = store, number, name
        store[number] = (name, False, "did not finish")

    def done(self, ok: bool, detail: str = "") -> bool:
        self.store[self.number] = (self.name, bool(ok), detail)
        print(_line(self.number, self.name, ok, detail))
        return bool(ok)


def _line(number, name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} [{number:2d}] {name}" + (f": {detail}" if detail else "")


@pytest.fixture
def criterion(request):
    store = request.config.stash.setdefault(_RESULTS, {})

    def start(number, name):
        return Criterion(store, number, name)

    return start


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(_line(number, *store[number]))
