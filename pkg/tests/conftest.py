import pytest

_RESULTS = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, title, ok, detail, seconds):
        line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail} | {seconds:.1f}s"
        _RESULTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[n])
