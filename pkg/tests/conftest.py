import numpy as np
import pytest
from hypothesis import settings

from odoflow import tensor as T

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64():
    """Verification runs in 64-bit; restore whatever a test changed."""
    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def leaf(x):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Criterion number -> (passed, detail), printed in the terminal summary."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
