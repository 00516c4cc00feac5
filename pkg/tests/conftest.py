import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def acceptance(request):
    """Records one verdict line per acceptance criterion for the end-of-run summary."""
    lines = request.config.stash[_KEY]

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        lines.append((number, f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda item: item[0]):
        terminalreporter.write_line(line)
