import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict; the terminal summary prints one line per criterion."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (name, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n}. {name}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
