import pytest


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(label, passed, detail)``."""

    def record(label, passed, detail=""):
        request.config._acceptance.append((label, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in lines:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {label}: {detail}")
