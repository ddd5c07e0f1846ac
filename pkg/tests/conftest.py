"""Shared pytest plumbing.

The acceptance tests record a one-line verdict per criterion through
record_acceptance; the terminal-summary hook prints those lines at the end
of the run so they are visible without -s.
"""

ACCEPTANCE_LINES: list[tuple[int, str]] = []


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
