import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(criterion: str, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [name for name, passed in checks.items() if not passed]
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        if failed:
            line += f"  [failed: {', '.join(failed)}]"
        ACCEPTANCE_LINES[criterion] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        digits = "".join(ch for ch in key if ch.isdigit())
        return int(digits or 0), key

    for key in sorted(ACCEPTANCE_LINES, key=order):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
