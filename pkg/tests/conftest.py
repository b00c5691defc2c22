import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    lines = request.config.stash[_LINES]

    def report(criterion: str, passed: bool, detail: str) -> None:
        lines.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        print(lines[-1])

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
