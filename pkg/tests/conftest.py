import pytest

# (number, title, passed, detail) for every acceptance criterion that ran
RESULTS: list = []


@pytest.fixture
def criterion(capsys):
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        RESULTS.append((number, title, passed, detail))
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}  {title}  {detail}")
