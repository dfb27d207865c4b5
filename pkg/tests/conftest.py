import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion_report():
    def record(number, name, passed, detail=""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
