import contextlib
import time

import pytest

_RESULTS: dict[int, tuple[str, bool, float, str]] = {}


class Criterion:
    """Times one acceptance criterion and records a pass/fail line for the summary."""

    def __init__(self):
        self.detail = ""

    @contextlib.contextmanager
    def __call__(self, number: int, title: str, budget_s: float):
        t0 = time.perf_counter()
        ok = False
        try:
            yield self
            elapsed = time.perf_counter() - t0
            assert elapsed < budget_s, f"criterion {number} took {elapsed:.1f} s, budget {budget_s:g} s"
            ok = True
        finally:
            _RESULTS[number] = (title, ok, time.perf_counter() - t0, self.detail)


@pytest.fixture
def criterion():
    return Criterion()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, elapsed, detail = _RESULTS[n]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({elapsed:.1f} s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
