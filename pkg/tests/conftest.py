import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leaf(a):
    """Gradient-tracking leaf tensor from an array."""
    from mgmicro.tensor import Tensor

    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` records one acceptance line and prints it."""

    def emit(number, ok, detail):
        line = f"acceptance criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
