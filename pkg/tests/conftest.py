from __future__ import annotations

import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one ``PASS``/``FAIL`` line per criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        _LINES.append(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}; {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
