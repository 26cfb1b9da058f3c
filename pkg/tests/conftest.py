"""Collects acceptance verdicts and prints one PASS/FAIL line per criterion after the run."""

import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion:>2}: {detail}"
        VERDICTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
