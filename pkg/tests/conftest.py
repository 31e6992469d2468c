"""Shared pytest hooks: the acceptance suite's PASS/FAIL report."""

ACCEPTANCE_LINES = {}


def report(number: int, ok: bool, detail: str):
    """Record and print one acceptance verdict."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
