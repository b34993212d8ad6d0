import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbo.kernels import KernelParams, kernel_derivatives, kernel_value

from conftest import fd_grad


def test_identity_and_hand_values():
    p = KernelParams(np.array([1.7, 0.3]))
    assert kernel_value([0.4, -2.0], [0.4, -2.0], p) == 1.0
    assert kernel_value([0.0], [1.0], KernelParams([1.0])) == pytest.approx(np.exp(-0.5))
    assert kernel_value([0, 0], [1, 1], KernelParams([2.0, 1.0])) == pytest.approx(np.exp(-2.5))


def test_derivatives_at_coincident_points():
    k, dx, dy, d2 = kernel_derivatives([0.2], [0.2], KernelParams([3.0]))
    assert k == 1.0
    assert np.all(dx == 0) and np.all(dy == 0)
    assert d2 == pytest.approx(np.array([[9.0]]))


def test_derivative_sign_1d():
    _, dx, dy, _ = kernel_derivatives([0.0], [1.0], KernelParams([1.0]))
    assert dx[0] == pytest.approx(np.exp(-0.5))
    assert dy[0] == pytest.approx(-np.exp(-0.5))


@pytest.mark.parametrize("bad", [[0.0, 1.0], [-1.0], [np.nan]])
def test_rejects_nonpositive_gamma(bad):
    with pytest.raises(ValueError):
        KernelParams(np.array(bad))


def test_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_value([0.0, 1.0], [0.0], KernelParams([1.0, 1.0]))


def test_derivatives_match_finite_differences(rng):
    for _ in range(100):
        n = int(rng.integers(1, 5))
        p = KernelParams(np.exp(rng.uniform(-1.5, 1.0, n)))
        x, y = rng.normal(size=n), rng.normal(size=n)
        k, dx, dy, d2 = kernel_derivatives(x, y, p)
        assert k == pytest.approx(kernel_value(x, y, p))
        np.testing.assert_allclose(dx, fd_grad(lambda z: kernel_value(z, y, p), x), rtol=1e-5, atol=1e-10)
        np.testing.assert_allclose(dy, fd_grad(lambda z: kernel_value(x, z, p), y), rtol=1e-5, atol=1e-10)
        for j in range(n):
            col = fd_grad(lambda z: kernel_derivatives(x, z, p)[1][j], y)
            np.testing.assert_allclose(d2[j], col, rtol=1e-5, atol=1e-9)


vec = arrays(np.float64, 3, elements=st.floats(-5, 5))
gam = arrays(np.float64, 3, elements=st.floats(0.01, 10))


@settings(max_examples=60, deadline=None)
@given(vec, vec, gam)
def test_symmetry_range_and_antisymmetry(x, y, g):
    p = KernelParams(g)
    k = kernel_value(x, y, p)
    assert 0.0 <= k <= 1.0
    assert k == kernel_value(y, x, p)
    _, dx, dy, d2 = kernel_derivatives(x, y, p)
    np.testing.assert_allclose(dx, -dy)
    np.testing.assert_allclose(d2, d2.T, atol=1e-15)
