from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance verdicts, printed as one line each at the end of the session.
VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(number: int, ok: bool, detail: str) -> None:
    VERDICTS[number] = (bool(ok), detail)
    print(verdict_line(number))


def verdict_line(number: int) -> str:
    ok, detail = VERDICTS[number]
    return f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(verdict_line(n))
