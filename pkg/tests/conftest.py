import numpy as np
import pytest


def fd_grad(fun, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
