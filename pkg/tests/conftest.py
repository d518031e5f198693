import contextlib
import time

import pytest

# (name, passed, detail) per acceptance criterion, in the order they ran
VERDICTS: list[tuple[str, bool, str]] = []


class _Verdict:
    def __init__(self):
        self.detail = ""
        self.started = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.started


@contextlib.contextmanager
def _criterion(name):
    v = _Verdict()
    try:
        yield v
    except BaseException as exc:
        message = str(exc).strip()
        detail = v.detail or (message.splitlines()[0] if message else "failed")
        VERDICTS.append((name, False, f"{detail} ({exc.__class__.__name__})"))
        print(f"\nACCEPTANCE FAIL  {name}: {detail}")
        raise
    VERDICTS.append((name, True, v.detail))
    print(f"\nACCEPTANCE PASS  {name}: {v.detail}")


@pytest.fixture
def criterion():
    """``with criterion(name) as v:`` records one pass/fail line; set ``v.detail`` for the numbers."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
