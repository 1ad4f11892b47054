import pytest

_CRITERIA: list[tuple[str, bool, str]] = []


class CriterionRecorder:
    """Collects one pass/fail line per acceptance criterion."""

    def __call__(self, name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        print(line)
        _CRITERIA.append((name, passed, detail))
        return passed


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
