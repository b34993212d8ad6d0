import numpy as np
import pytest
from scipy import linalg

from cbo.gp import (
    CONDMAX,
    N_HYPER_STARTS,
    GpModel,
    TrainingSet,
    build_grad_kernel_matrix,
    fit_beta_sigK2,
    fit_gp,
    hyper_bounds,
    log_marginal_likelihood,
    log_marginal_likelihood_grad,
    precondition,
    select_hyperparameters,
)
from cbo.kernels import KernelParams, kernel_derivatives

from conftest import fd_grad


def smooth(x):
    v = np.sin(x[0]) + 0.3 * x @ x
    g = 0.6 * x
    g[0] += np.cos(x[0])
    return v, g


def training(X, fn=smooth):
    vals = [fn(x) for x in X]
    return TrainingSet.from_arrays(X, [v for v, _ in vals], [g for _, g in vals])


def test_training_set_layout():
    X = np.array([[0.0, 1.0], [2.0, 3.0]])
    ts = TrainingSet.from_arrays(X, [5.0, 6.0], [[1.0, 2.0], [3.0, 4.0]])
    # values first, then one block per coordinate over all points
    np.testing.assert_array_equal(ts.f_grad, [5, 6, 1, 3, 2, 4])
    np.testing.assert_array_equal(ts.gradients, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ts.one_mod(), [1, 1, 0, 0, 0, 0])


def test_single_point_matrix():
    Kg = build_grad_kernel_matrix(np.array([[0.3]]), KernelParams([2.0]))
    np.testing.assert_allclose(Kg, [[1.0, 0.0], [0.0, 4.0]])


def test_far_points_decouple():
    Kg = build_grad_kernel_matrix(np.array([[0.0], [10.0]]), KernelParams([1.0]))
    assert Kg[0, 1] == pytest.approx(np.exp(-50.0))
    np.testing.assert_allclose(Kg[np.ix_([0, 2], [0, 2])], [[1, 0], [0, 1]])


def test_matrix_entries_match_kernel_derivatives(rng):
    X = rng.normal(size=(4, 3))
    p = KernelParams([0.7, 1.2, 0.4])
    Kg = build_grad_kernel_matrix(X, p)
    np.testing.assert_allclose(Kg, Kg.T, atol=1e-14)
    n = 4
    for a in range(n):
        for b in range(n):
            k, dx, dy, d2 = kernel_derivatives(X[a], X[b], p)
            assert Kg[a, b] == pytest.approx(k)
            for i in range(3):
                assert Kg[a, n + i * n + b] == pytest.approx(dy[i])
                assert Kg[n + i * n + a, b] == pytest.approx(dx[i])
                for j in range(3):
                    assert Kg[n + i * n + a, n + j * n + b] == pytest.approx(d2[i, j])


def test_duplicate_points_rejected():
    with pytest.raises(ValueError):
        build_grad_kernel_matrix(np.array([[1.0, 2.0], [1.0, 2.0]]), KernelParams([1.0, 1.0]))


def test_precondition_examples():
    # the nugget carries a 1e-4 relative guard against rounding in the eigenvalue bound
    P, W, eta = precondition(np.eye(5))
    np.testing.assert_array_equal(P, 1.0)
    np.testing.assert_array_equal(W, 1.0)
    assert eta == pytest.approx(1.0 / (CONDMAX - 1.0), rel=1e-3)
    P, W, eta = precondition(np.array([[1.0, 0.0], [0.0, 4.0]]))
    np.testing.assert_allclose(P, [1.0, 2.0])
    np.testing.assert_allclose(W, [1.0, 4.0])
    assert eta == pytest.approx(1.0 / (CONDMAX - 1.0), rel=1e-3)


def test_precondition_rejects_bad_input():
    with pytest.raises(Exception):
        precondition(np.diag([1.0, 0.0]))
    with pytest.raises(ValueError):
        precondition(np.eye(2), condmax=1.0)


def test_precondition_bounds_condition_on_random_spd(rng):
    for _ in range(50):
        m = int(rng.integers(2, 21))
        B = rng.normal(size=(m, m // 2 + 1))
        Kg = B @ B.T + np.diag(rng.uniform(1e-6, 1.0, m))
        P, _, eta = precondition(Kg, 1e6)
        R = Kg / np.outer(P, P) + eta * np.eye(m)
        ev = np.linalg.eigvalsh(R)
        assert ev[-1] / ev[0] <= 1e6


def test_beta_sigma_constant_and_scaling(rng):
    X = rng.uniform(-1, 1, size=(5, 2))
    p = KernelParams([1.0, 1.0])
    Kg = build_grad_kernel_matrix(X, p)
    P, W, eta = precondition(Kg)
    const = TrainingSet.from_arrays(X, np.full(5, 3.5), np.zeros((5, 2)))
    beta, sig = fit_beta_sigK2(const, p, eta, W, P)
    assert beta == pytest.approx(3.5)
    assert sig <= 1e-8 * 3.5**2
    ts = training(X)
    b1, s1 = fit_beta_sigK2(ts, p, eta, W, P)
    scaled = TrainingSet(X, 4.0 * ts.f_grad)
    b2, s2 = fit_beta_sigK2(scaled, p, eta, W, P)
    assert b2 == pytest.approx(4.0 * b1)
    assert s2 == pytest.approx(16.0 * s1)


def test_beta_sigma_match_dense_solve():
    X = np.array([[0.1], [0.9]])
    ts = training(X)
    p = KernelParams([1.3])
    Kg = build_grad_kernel_matrix(X, p)
    P, W, eta = precondition(Kg)
    C = Kg + eta * np.diag(W)
    one = ts.one_mod()
    Ci = np.linalg.inv(C)
    beta = one @ Ci @ ts.f_grad / (one @ Ci @ one)
    r = ts.f_grad - beta * one
    sig = r @ Ci @ r / one.size
    b, s = fit_beta_sigK2(ts, p, eta, W, P)
    assert b == pytest.approx(beta, rel=1e-9)
    assert s == pytest.approx(sig, rel=1e-7)


def dense_lml(ts, p):
    Kg = build_grad_kernel_matrix(ts.X, p)
    P, W, eta = precondition(Kg)
    R = Kg / np.outer(P, P) + eta * np.eye(P.size)
    lam, V = np.linalg.eigh(R)
    one = ts.one_mod() / P
    f = ts.f_grad / P
    quad = lambda u, v: (u @ V) @ ((V.T @ v) / lam)
    beta = quad(one, f) / quad(one, one)
    r = f - beta * one
    m = one.size
    sig = quad(r, r) / m
    return -0.5 * m * np.log(sig) - 0.5 * (np.sum(np.log(lam)) + np.sum(np.log(W)))


def test_lml_matches_dense_and_is_permutation_invariant(rng):
    for _ in range(10):
        n_x, n_d = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        X = rng.uniform(-1, 1, size=(n_x, n_d))
        ts = training(X)
        p = KernelParams(np.exp(rng.uniform(-0.5, 1.0, n_d)))
        lml = log_marginal_likelihood(p, ts)
        # solves at condition ~condmax lose about eps * condmax, so compare loosely
        assert lml == pytest.approx(dense_lml(ts, p), abs=1e-6 * ts.f_grad.size)
        perm = rng.permutation(n_x)
        assert log_marginal_likelihood(p, training(X[perm])) == pytest.approx(lml, abs=1e-6 * ts.f_grad.size)


def test_lml_gradient(rng):
    X = rng.uniform(-1, 1, size=(6, 2))
    ts = training(X)
    theta = np.log([0.8, 1.4])
    g = log_marginal_likelihood_grad(KernelParams(np.exp(theta)), ts)[1]
    # smaller steps drown in rounding amplified by the condition number
    fd = fd_grad(lambda t: log_marginal_likelihood(KernelParams(np.exp(t)), ts), theta, 1e-3)
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_constant_data_likelihood_dominates(rng):
    X = rng.uniform(-1, 1, size=(4, 1))
    p = KernelParams([1.0])
    const = TrainingSet.from_arrays(X, np.ones(4), np.zeros((4, 1)))
    other = training(X)
    scale = np.linalg.norm(const.f_grad) / np.linalg.norm(other.f_grad)
    other = TrainingSet(X, other.f_grad * scale)
    assert log_marginal_likelihood(p, const) > log_marginal_likelihood(p, other)


def test_hyper_bounds_scale_with_data():
    ts = training(np.array([[0.0, 0.0], [2.0, 0.5]]))
    lo, hi = hyper_bounds(ts)
    np.testing.assert_allclose(np.exp(lo), [1e-2 / 2.0, 1e-2 / 0.5])
    np.testing.assert_allclose(np.exp(hi), [1e2 / 2.0, 1e2 / 0.5])


def test_select_hyperparameters_beats_candidates_and_is_deterministic(rng):
    X = rng.uniform(-2, 2, size=(8, 2))
    ts = training(X)
    p1 = select_hyperparameters(ts, n_starts=20, seed=5)
    p2 = select_hyperparameters(ts, n_starts=20, seed=5)
    np.testing.assert_array_equal(p1.gamma, p2.gamma)
    best = log_marginal_likelihood(p1, ts)
    lo, hi = hyper_bounds(ts)
    for t in np.linspace(lo, hi, 7):
        assert best >= log_marginal_likelihood(KernelParams(np.exp(t)), ts) - 1e-9
    assert N_HYPER_STARTS == 50


def test_recovers_known_length_scale():
    rng = np.random.default_rng(7)
    gamma_true = 1.5
    X = np.sort(rng.uniform(-3, 3, size=(15, 1)), axis=0)
    Kg = build_grad_kernel_matrix(X, KernelParams([gamma_true]))
    L = np.linalg.cholesky(Kg + 1e-10 * np.eye(Kg.shape[0]))
    sample = L @ rng.normal(size=Kg.shape[0])
    ts = TrainingSet(X, sample)
    est = select_hyperparameters(ts, seed=0).gamma[0]
    assert gamma_true / 2 <= est <= gamma_true * 2


def test_posterior_misfit_is_the_nugget_term(rng):
    X = rng.uniform(-2, 2, size=(9, 3))
    ts = training(X)
    model = fit_gp(ts, n_starts=20)
    n_x = X.shape[0]
    expected = -model.eta * model.P[:n_x] ** 2 * model.alpha[:n_x]
    mu = np.array([model.posterior(x).mu for x in X])
    np.testing.assert_allclose(mu - ts.f_grad[:n_x], expected, rtol=1e-4, atol=1e-12)


def test_posterior_interpolates_well_conditioned_data():
    X = np.array([[0.0, 0.0], [1.5, 0.2], [-0.4, 1.7], [1.1, -1.3], [-1.6, -0.9]])
    ts = training(X)
    model = fit_gp(ts, params=KernelParams([1.5, 1.5]))
    for x in X:
        v, g = smooth(x)
        p = model.posterior(x)
        assert abs(p.mu - v) <= 1e-4 * (1 + abs(v))
        assert p.var <= 1e-4 * model.sigK2
        np.testing.assert_allclose(p.mu_grad, g, rtol=1e-3, atol=1e-3 * np.max(np.abs(g)))


def test_posterior_far_from_data(rng):
    X = rng.uniform(-1, 1, size=(5, 2))
    model = fit_gp(training(X), params=KernelParams([1.0, 1.0]))
    p = model.posterior(np.array([60.0, -60.0]))
    assert p.mu == pytest.approx(model.beta)
    assert p.var == pytest.approx(model.sigK2)


def test_posterior_gradients_and_hessian(rng):
    X = rng.uniform(-2, 2, size=(7, 2))
    model = fit_gp(training(X), params=KernelParams([0.6, 0.9]))
    for _ in range(10):
        x = rng.uniform(-2, 2, size=2)
        p = model.posterior(x)
        np.testing.assert_allclose(p.mu_grad, fd_grad(lambda z: model.posterior(z).mu, x), rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(p.var_grad, fd_grad(lambda z: model.posterior(z).var, x), rtol=1e-5, atol=1e-9)
        H = model.mean_hessian(x)
        np.testing.assert_allclose(H, H.T, atol=1e-12)
        for i in range(2):
            col = fd_grad(lambda z: model.posterior(z).mu_grad[i], x)
            np.testing.assert_allclose(H[:, i], col, rtol=1e-5, atol=1e-8)


def test_variance_nonnegative_and_preclamp_small(rng):
    X = rng.uniform(-1, 1, size=(6, 2))
    model = fit_gp(training(X), params=KernelParams([0.05, 0.05]))
    for x in np.vstack([X, rng.uniform(-1, 1, size=(30, 2))]):
        p = model.posterior(x)
        assert p.var >= 0.0
        assert p.var_raw >= -1e-8 * model.sigK2


def test_conditioning_of_fitted_models(rng):
    for _ in range(20):
        n_x, n_d = int(rng.integers(1, 10)), int(rng.integers(1, 4))
        model = fit_gp(training(rng.uniform(-1, 1, size=(n_x, n_d))), params=KernelParams(np.full(n_d, 1e-3)))
        ev = np.linalg.eigvalsh(model.preconditioned_matrix())
        assert ev[-1] / ev[0] <= CONDMAX


def test_sigma_refit_idempotent():
    # well-separated points keep the nugget's share of the misfit negligible
    X = np.array([[0.0, 0.0], [1.5, 0.2], [-0.4, 1.7], [1.1, -1.3], [-1.6, -0.9], [2.0, 1.9]])
    model = fit_gp(training(X), params=KernelParams([1.5, 1.5]))
    vals = [(model.posterior(x).mu, model.posterior(x).mu_grad) for x in X]
    ts2 = TrainingSet.from_arrays(X, [v for v, _ in vals], [g for _, g in vals])
    refit = fit_gp(ts2, params=model.params)
    assert refit.sigK2 == pytest.approx(model.sigK2, rel=1e-6)


def test_model_is_frozen(rng):
    model = fit_gp(training(rng.uniform(size=(3, 1))), params=KernelParams([1.0]))
    assert isinstance(model, GpModel)
    with pytest.raises(Exception):
        model.beta = 0.0
