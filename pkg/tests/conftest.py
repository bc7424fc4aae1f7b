from __future__ import annotations

import pytest

# criterion number -> (passed, title, detail); filled by the acceptance suite.
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self) -> "_Criterion":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {exc}"
        ACCEPTANCE[self.number] = (ok, self.title, detail)
        print(f"criterion {self.number}: {'PASS' if ok else 'FAIL'} - {self.title} ({detail})")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title} ({detail})")
