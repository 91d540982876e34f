import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()
CRITERIA = 11


@pytest.fixture
def report(request):
    """Record one acceptance line; the verdict is printed again in the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def _report(number: int, title: str, ok: bool, detail: str = ""):
        results[number] = (title, bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")

    return _report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        if n in results:
            title, ok, detail = results[n]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"----  {n:2d}. not run or errored before reporting")
