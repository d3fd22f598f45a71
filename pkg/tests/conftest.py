import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("chartflow", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("chartflow")

_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria_log():
    """Shared record of acceptance verdicts, printed in the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key])
