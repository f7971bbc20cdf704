import pytest

_RESULTS = "acceptance_results"


def pytest_configure(config):
    setattr(config, _RESULTS, {})


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, status, detail)``."""
    results = getattr(request.config, _RESULTS)

    def record(number: int, status: str, detail: str):
        line = f"CRITERION {number}: {status} - {detail}"
        results[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, _RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
