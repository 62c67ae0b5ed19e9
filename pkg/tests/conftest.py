"""Shared pytest hooks: a registry that prints one PASS/FAIL line per acceptance criterion."""

import pytest

_RESULTS: dict = {}


class CriterionRecorder:
    """Collects the outcome of one criterion; every ``check`` must hold for a PASS."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.checks: list = []
        _RESULTS[number] = self

    def check(self, ok: bool, detail: str) -> bool:
        self.checks.append((bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for ok, _ in self.checks)

    def failures(self) -> list:
        return [d for ok, d in self.checks if not ok]


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_RESULTS):
        rec = _RESULTS[k]
        tr.write_line(f"criterion {k}: {'PASS' if rec.passed else 'FAIL'}  {rec.title}")
        for ok, detail in rec.checks:
            tr.write_line(f"    [{'ok' if ok else '!!'}] {detail}")
