import numpy as np
import pytest

from raven.numerics import ParamStore


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def store64(**arrays):
    """float64 ParamStore holding the given arrays."""
    s = ParamStore(np.float64)
    for k, v in arrays.items():
        s.add(k, np.asarray(v, dtype=np.float64))
    return s


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
