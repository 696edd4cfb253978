import contextlib
import time

import pytest

VERDICTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n: int, budget_s: float):
    """Record PASS/FAIL for acceptance criterion ``n``; exceeding ``budget_s`` fails it."""
    start = time.perf_counter()
    detail: dict = {}
    try:
        yield detail
        took = time.perf_counter() - start
        detail.setdefault("runtime_s", round(took, 2))
        assert took < budget_s, f"runtime {took:.1f}s exceeds {budget_s}s"
    except BaseException as exc:
        VERDICTS[n] = f"FAIL criterion {n}: {exc} {detail}".strip()
        raise
    VERDICTS[n] = f"PASS criterion {n}: " + ", ".join(f"{k}={v}" for k, v in detail.items())


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])


@pytest.fixture
def accept():
    return criterion
