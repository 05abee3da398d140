import pytest

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria")
    config.addinivalue_line("markers", "slow: full-length experiment runs (tens of minutes each)")


@pytest.fixture(scope="session")
def acceptance_report():
    def report(criterion: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
        print(line)
        ACCEPTANCE_LINES.append((criterion, passed, line))

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
