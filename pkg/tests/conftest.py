"""Shared pytest plumbing: collects acceptance lines for the final summary."""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Records one acceptance verdict; returns ok so tests can assert on it."""

    def record(name, ok, detail=""):
        line = f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
