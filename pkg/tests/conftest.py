from __future__ import annotations

import pytest

_LINES: dict[int, list[str]] = {}


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(self, criterion: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
        _LINES.setdefault(criterion, []).append(line)
        print(line)
        return ok

    def note(self, criterion: int, detail: str) -> None:
        line = f"[INFO] criterion {criterion:2d}: {detail}"
        _LINES.setdefault(criterion, []).append(line)
        print(line)


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_LINES):
        for line in _LINES[k]:
            terminalreporter.write_line(line)
