import pytest

ACCEPTANCE_LINES: dict[int, str] = {}
TREND_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def trend_log():
    return TREND_LINES


def pytest_terminal_summary(terminalreporter):
    if TREND_LINES:
        terminalreporter.section("desk ablation per seed")
        for line in TREND_LINES:
            terminalreporter.write_line(line)
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
