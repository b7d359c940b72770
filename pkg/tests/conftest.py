"""Collects the acceptance verdict lines and repeats them at the end of the run."""

import pytest

VERDICTS: list[str] = []


@pytest.fixture()
def verdict(capsys):
    """``verdict(n, name, ok, detail)`` prints one PASS/FAIL line and records it."""
    def emit(n: int, name: str, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
