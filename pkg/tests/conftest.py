import contextlib
import time

import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Record one acceptance criterion as PASS/FAIL for the terminal summary."""

    @contextlib.contextmanager
    def record(name: str):
        outcome = _Outcome()
        start = time.perf_counter()
        try:
            yield outcome
        except BaseException as exc:
            ACCEPTANCE.append((name, False, f"{outcome.detail} {type(exc).__name__}: {exc}".strip()))
            raise
        ACCEPTANCE.append((name, True, f"{outcome.detail} ({time.perf_counter() - start:.1f}s)".strip()))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail.splitlines()[0] if detail else ''}")
