import pytest

N_CRITERIA = 12
_RESULTS = pytest.StashKey()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(n, name, ok, detail)`` records one acceptance line."""
    store = request.config.stash[_RESULTS]

    def record(n, name, ok, detail=""):
        store[n] = (name, bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in store:
            name, ok, detail = store[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {n:2d}. not run")
