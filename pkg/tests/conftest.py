"""Collects the one-line acceptance verdicts and repeats them at the end of the run."""

import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: int, name: str, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {criterion} {name}: {'PASS' if ok else 'FAIL'} | {detail}"
        VERDICTS.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
