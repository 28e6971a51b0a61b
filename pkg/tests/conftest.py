import time
from contextlib import contextmanager

import pytest

# one entry per acceptance criterion that ran this session
REPORT: list[tuple[int, str, bool, str, float]] = []


class Outcome:
    def __init__(self):
        self.notes = []

    def note(self, text):
        self.notes.append(str(text))


@pytest.fixture
def criterion():
    """Time a criterion body and record a PASS/FAIL line for the terminal summary."""

    @contextmanager
    def run(number: int, title: str, limit_s: float):
        out = Outcome()
        t0 = time.perf_counter()
        ok, err = True, None
        try:
            yield out
        except AssertionError as e:
            ok, err = False, e
        elapsed = time.perf_counter() - t0
        if elapsed > limit_s:
            out.note(f"runtime {elapsed:.1f}s over the {limit_s:g}s limit")
            ok = False
        detail = "; ".join(out.notes + ([f"failed: {err}".splitlines()[0]] if err else []))
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}  [{elapsed:.2f}s]  {detail}"
        print(line)
        REPORT.append((number, title, ok, detail, elapsed))
        if err is not None:
            raise err
        assert ok, line

    return run


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail, elapsed in sorted(REPORT):
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}  [{elapsed:.2f}s]  {detail}")
