import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbo.gp import TrainingSet, fit_gp
from cbo.kernels import KernelParams
from cbo.trust import (
    TrustPolicy,
    TrustState,
    is_active,
    made_progress,
    shrink,
    tr_circle,
    tr_sigma,
    update_bounds,
)

from conftest import fd_grad


def test_initial_state():
    s = TrustState.initial(np.zeros(2), np.array([3.0, 4.0]))
    assert s.ub_circle == pytest.approx(0.25)
    assert s.ub_sigma == 0.5
    assert s.no_progress_count == 0


@pytest.mark.parametrize("kw", [dict(ub_circle=0.0, ub_sigma=0.5), dict(ub_circle=1.0, ub_sigma=1.5),
                                dict(ub_circle=1.0, ub_sigma=0.5, no_progress_count=-1)])
def test_state_validation(kw):
    with pytest.raises(ValueError):
        TrustState(**kw)


def test_policy_validation():
    with pytest.raises(ValueError):
        TrustPolicy(circle_grow=1.0)
    with pytest.raises(ValueError):
        TrustPolicy(patience=0)


def test_grow_only_when_region_was_active():
    s = TrustState(1.0, 0.8, no_progress_count=1)
    grown = update_bounds(s, True, True)
    assert (grown.ub_circle, grown.ub_sigma, grown.no_progress_count) == (2.0, 1.0, 0)
    kept = update_bounds(s, True, False)
    assert (kept.ub_circle, kept.ub_sigma, kept.no_progress_count) == (1.0, 0.8, 0)


def test_shrink_after_patience():
    s = TrustState(1.0, 0.3)
    s1 = update_bounds(s, False, True)
    assert (s1.ub_circle, s1.no_progress_count) == (1.0, 1)
    s2 = update_bounds(s1, False, False)
    assert s2.ub_circle == 0.5 and s2.ub_sigma == pytest.approx(0.2) and s2.no_progress_count == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=60))
def test_bounds_stay_valid(events):
    s = TrustState(1.0, 0.5)
    for progress, active in events:
        s = update_bounds(s, progress, active)
        assert s.ub_circle > 0
        assert 1e-8 <= s.ub_sigma <= 1.0
    s = shrink(s)
    assert s.ub_sigma >= 1e-8


def test_progress_and_activity():
    assert made_progress(1.0, 0.5)
    assert not made_progress(1.0, 1.0)
    assert not made_progress(1.0, 1.0 - 1e-14)
    assert made_progress(0.0, -1e-300)
    assert is_active(1.0, 1.0)
    assert is_active(1.0 - 1e-7, 1.0)
    assert not is_active(0.9, 1.0)


def test_tr_circle():
    v, g = tr_circle([1.0, 2.0], [0.0, 0.0])
    assert v == 5.0
    np.testing.assert_array_equal(g, [2.0, 4.0])
    with pytest.raises(ValueError):
        tr_circle([1.0], [0.0, 0.0])


def test_tr_sigma_bounds_and_gradient(rng):
    X = rng.uniform(-1, 1, size=(4, 2))
    ts = TrainingSet.from_arrays(X, np.sin(X[:, 0]), np.c_[np.cos(X[:, 0]), np.zeros(4)])
    model = fit_gp(ts, params=KernelParams([1.2, 0.9]))
    assert tr_sigma(model, X[0])[0] <= 1e-6
    far = tr_sigma(model, np.array([50.0, 50.0]))
    assert far[0] == 1.0 and np.all(far[1] == 0.0)
    x = np.array([0.3, -0.2])
    v, g = tr_sigma(model, x)
    assert 0.0 < v < 1.0
    np.testing.assert_allclose(g, fd_grad(lambda z: tr_sigma(model, z)[0], x, 1e-6), rtol=1e-4, atol=1e-8)
