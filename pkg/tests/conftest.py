import numpy as np
import pytest

from fedmho import nn


def central_difference(f, value, h=1e-5):
    """Numeric gradient of scalar ``f()`` w.r.t. every entry of ``value`` (edited in place)."""
    grad = np.zeros_like(value)
    it = np.nditer(value, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = value[i]
        value[i] = orig + h
        up = f()
        value[i] = orig - h
        down = f()
        value[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = np.abs(a) + np.abs(n)
    mask = denom >= floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - n)[mask] / denom[mask]))


def params_from(arrays):
    return [nn.Parameter(a) for a in arrays]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
