import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, shown in the terminal summary."""
    def record(number, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        request.config._acceptance_lines.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
