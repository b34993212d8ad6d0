"""Gradient-enhanced Gaussian process with a guaranteed-conditioning factorization.

Training data are stacked as ``[f(x_1..x_nx), df/dx_1 at all points, ..., df/dx_nd at all
points]``; every covariance matrix in this module uses the same block layout.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.stats import qmc

from .kernels import KernelParams

CONDMAX = 1e10
N_HYPER_STARTS = 50
ETA_GUARD = 1.0 + 1e-4


class NumericError(RuntimeError):
    """Raised when a factorization that should be well posed fails."""


@dataclass(frozen=True)
class TrainingSet:
    X: np.ndarray
    f_grad: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        fg = np.asarray(self.f_grad, dtype=float).ravel()
        n_x, n_d = X.shape
        if fg.size != n_x * (n_d + 1):
            raise ValueError(f"f_grad has length {fg.size}, expected {n_x * (n_d + 1)}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "f_grad", fg)

    @classmethod
    def from_arrays(cls, X, f, df):
        """Build from values ``f`` (n_x,) and gradients ``df`` (n_x, n_d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        df = np.asarray(df, dtype=float).reshape(X.shape)
        return cls(X, np.concatenate([np.asarray(f, dtype=float).ravel(), df.T.ravel()]))

    @property
    def n_x(self) -> int:
        return self.X.shape[0]

    @property
    def n_dim(self) -> int:
        return self.X.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.f_grad[: self.n_x]

    @property
    def gradients(self) -> np.ndarray:
        return self.f_grad[self.n_x :].reshape(self.n_dim, self.n_x).T

    def one_mod(self) -> np.ndarray:
        out = np.zeros(self.f_grad.size)
        out[: self.n_x] = 1.0
        return out


def _check_distinct(X):
    if X.shape[0] < 2:
        return
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    if np.any(d2 == 0.0):
        i, j = np.argwhere(d2 == 0.0)[0]
        raise ValueError(f"training points {i} and {j} coincide; covariance would be singular")


def _blocks(X, s):
    """Differences, kernel matrix and scaled differences shared by assembly routines."""
    D = X[:, None, :] - X[None, :, :]
    K = np.exp(-0.5 * np.einsum("abi,i,abi->ab", D, s, D))
    return D, K, D * s


def build_grad_kernel_matrix(X, params: KernelParams) -> np.ndarray:
    """Gradient-enhanced kernel matrix of size ``n_x (n_d + 1)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_x, n_d = X.shape
    if n_d != params.n_dim:
        raise ValueError(f"X has {n_d} columns but gamma has {params.n_dim} entries")
    _check_distinct(X)
    s = params.gamma**2
    D, K, A = _blocks(X, s)
    G = np.empty((n_d + 1, n_x, n_d + 1, n_x))
    G[0, :, 0, :] = K
    AK = A * K[:, :, None]
    G[0, :, 1:, :] = AK.transpose(0, 2, 1)
    G[1:, :, 0, :] = -AK.transpose(2, 0, 1)
    G[1:, :, 1:, :] = np.einsum("ij,ab->iajb", np.diag(s), K) - np.einsum(
        "abi,abj,ab->iajb", A, A, K
    )
    m = n_x * (n_d + 1)
    return G.reshape(m, m)


def _kg_lml_terms(X, s, B):
    """Contract ``B`` with dKg/d(log gamma_k) for every k without forming the derivatives."""
    n_x, n_d = X.shape
    D, K, A = _blocks(X, s)
    B4 = B.reshape(n_d + 1, n_x, n_d + 1, n_x)
    G = np.empty_like(B4)
    G[0, :, 0, :] = K
    AK = A * K[:, :, None]
    G[0, :, 1:, :] = AK.transpose(0, 2, 1)
    G[1:, :, 0, :] = -AK.transpose(2, 0, 1)
    G[1:, :, 1:, :] = np.einsum("ij,ab->iajb", np.diag(s), K) - np.einsum(
        "abi,abj,ab->iajb", A, A, K
    )
    H = np.einsum("iajb,iajb->ab", B4, G)
    out = -0.5 * np.einsum("abk,ab->k", D**2, H)
    DK = D * K[:, :, None]
    out += np.einsum("akb,abk->k", B4[0, :, 1:, :], DK)
    out -= np.einsum("kab,abk->k", B4[1:, :, 0, :], DK)
    diag_blocks = np.einsum("kakb->kab", B4[1:, :, 1:, :])
    out += np.einsum("kab,ab->k", diag_blocks, K)
    # row block k against every column block j, and the transposed term
    out -= np.einsum("kajb,abj,abk->k", B4[1:, :, 1:, :], A, DK)
    out -= np.einsum("iakb,abi,abk->k", B4[1:, :, 1:, :], A, DK)
    return 2.0 * s * out


def precondition(Kg, condmax: float = CONDMAX):
    """Diagonal preconditioner, nugget weights and nugget bounding the condition number.

    Returns ``(P, W, eta)`` with ``P`` and ``W`` as the diagonals of the matrices.
    ``P^-1 (Kg + eta W) P^-1`` has condition number at most ``condmax``.
    """
    if not condmax > 1.0:
        raise ValueError("condmax must exceed 1")
    Kg = np.asarray(Kg, dtype=float)
    diag = np.diag(Kg)
    if np.any(diag <= 0.0):
        raise NumericError("kernel matrix has a nonpositive diagonal entry")
    P = np.sqrt(diag)
    W = P * P
    Kn = Kg / np.outer(P, P)
    # the small guard keeps the Gershgorin bound strict after rounding in the factorization
    eta = ETA_GUARD * np.max(np.sum(np.abs(Kn), axis=1)) / (condmax - 1.0)
    return P, W, float(eta)


@dataclass
class _Factor:
    P: np.ndarray
    eta: float
    L: np.ndarray

    def solve(self, v):
        """Solve ``(Kg + eta W) z = v``."""
        y = linalg.cho_solve((self.L, True), (v.T / self.P).T, check_finite=False)
        return (y.T / self.P).T

    def logdet(self) -> float:
        return 2.0 * np.sum(np.log(self.P)) + 2.0 * np.sum(np.log(np.diag(self.L)))


def _factor(Kg, condmax, P=None, eta=None) -> _Factor:
    if P is None:
        P, _, eta = precondition(Kg, condmax)
    R = Kg / np.outer(P, P)
    R[np.diag_indices_from(R)] += eta
    try:
        L = linalg.cholesky(R, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericError(f"Cholesky of preconditioned covariance failed: {exc}") from exc
    return _Factor(P, eta, L)


def _beta_sig(fac: _Factor, f_grad, one_mod):
    Ci_f = fac.solve(f_grad)
    Ci_1 = fac.solve(one_mod)
    beta = float(one_mod @ Ci_f / (one_mod @ Ci_1))
    r = f_grad - beta * one_mod
    a = Ci_f - beta * Ci_1
    sig2 = max(float(r @ a) / f_grad.size, 0.0)
    return beta, sig2, a


def fit_beta_sigK2(training: TrainingSet, params: KernelParams, eta, W, P):
    """Closed-form constant mean and kernel variance for fixed hyperparameters."""
    Kg = build_grad_kernel_matrix(training.X, params)
    P = np.asarray(P, dtype=float)
    W = np.asarray(W, dtype=float)
    if not np.allclose(W, P * P):
        raise ValueError("W must equal P^2 for the noise-free preconditioner")
    fac = _factor(Kg, None, P=P, eta=float(eta))
    beta, sig2, _ = _beta_sig(fac, training.f_grad, training.one_mod())
    return beta, sig2


_TINY = np.finfo(float).tiny


def _kg_row_dlog(X, s, r):
    """Row ``r`` of dKg/d(log gamma_l) for every ``l``, shape ``(n_d, m)``."""
    n_x, n_d = X.shape
    a, q = r % n_x, r // n_x
    D = X[a] - X
    k = np.exp(-0.5 * (D * D) @ s)
    dk = -0.5 * (D * D) * k[:, None]  # dk/ds_l, shape (n_x, n_d)
    eye = np.eye(n_d)
    out = np.empty((n_d, n_d + 1, n_x))
    if q == 0:
        out[:, 0, :] = dk.T
        # entries s_j D_j k
        out[:, 1:, :] = np.einsum("jl,bj,b->ljb", eye, D, k) + np.einsum("j,bj,bl->ljb", s, D, dk)
    else:
        i = q - 1
        Di = D[:, i]
        # value column: -s_i D_i k
        out[:, 0, :] = -s[i] * (Di[:, None] * dk).T
        out[i, 0, :] -= Di * k
        # derivative columns: k (s_i delta_ij - s_i D_i s_j D_j)
        base = s[i] * eye[i][:, None] - s[i] * (s[:, None] * D.T) * Di[None, :]
        out[:, 1:, :] = dk.T[:, None, :] * base[None, :, :]
        out[i, 1 + i, :] += k
        out[i, 1:, :] -= (s[:, None] * D.T) * (Di * k)[None, :]
        for l in range(n_d):
            out[l, 1 + l, :] -= s[i] * Di * D[:, l] * k
    return 2.0 * s[:, None] * out.reshape(n_d, -1)


def _lml(training, s, condmax, with_grad):
    params = KernelParams(np.sqrt(s))
    X = training.X
    Kg = build_grad_kernel_matrix(X, params)
    fac = _factor(Kg, condmax)
    one = training.one_mod()
    beta, sig2, a = _beta_sig(fac, training.f_grad, one)
    m = training.f_grad.size
    sig2 = max(sig2, _TINY)
    val = -0.5 * m * np.log(sig2) - 0.5 * fac.logdet()
    if not with_grad:
        return val, None
    n_x, n_d = X.shape
    Ci = fac.solve(np.eye(m))
    B = np.outer(a, a) / sig2 - Ci
    grad = 0.5 * _kg_lml_terms(X, s, B)

    # the nugget and its weights move with gamma as well
    P = fac.P
    W = P * P
    Bd = np.diag(B)
    block_sums = Bd[n_x:].reshape(n_d, n_x).sum(axis=1)
    grad += fac.eta * s * block_sums
    Kn = Kg / np.outer(P, P)
    row = int(np.argmax(np.sum(np.abs(Kn), axis=1)))
    in_block = np.zeros((n_d, m))
    for l in range(n_d):
        in_block[l, (l + 1) * n_x : (l + 2) * n_x] = 1.0
    dKn = _kg_row_dlog(X, s, row) / (P[row] * P) - Kn[row] * (in_block[:, row][:, None] + in_block)
    d_eta = ETA_GUARD / (condmax - 1.0) * (dKn @ np.sign(Kn[row]))
    grad += 0.5 * d_eta * float(Bd @ W)
    return val, grad


def log_marginal_likelihood(params: KernelParams, training: TrainingSet, condmax=CONDMAX) -> float:
    """Concentrated log-likelihood with constants dropped."""
    if params.n_dim != training.n_dim:
        raise ValueError("gamma length does not match training dimension")
    return float(_lml(training, params.gamma**2, condmax, False)[0])


def log_marginal_likelihood_grad(params: KernelParams, training: TrainingSet, condmax=CONDMAX):
    """Log-likelihood and its gradient with respect to ``log(gamma)``.

    The gradient accounts for the nugget and preconditioner changing with gamma.
    """
    val, grad = _lml(training, params.gamma**2, condmax, True)
    return float(val), grad


def hyper_bounds(training: TrainingSet, default_scale=1.0):
    """Log-gamma search box scaled by the per-coordinate extent of the data."""
    X = training.X
    ell = np.ptp(X, axis=0) if X.shape[0] > 1 else np.zeros(X.shape[1])
    if np.all(ell <= 0.0):
        ell = np.full(X.shape[1], float(default_scale))
    else:
        ell = np.where(ell > 0.0, ell, ell.max())
    return np.log(1e-2 / ell), np.log(1e2 / ell)


def select_hyperparameters(
    training: TrainingSet,
    condmax=CONDMAX,
    n_starts=N_HYPER_STARTS,
    seed=0,
    gamma0=None,
    default_scale=1.0,
    max_iter=100,
) -> KernelParams:
    """Maximize the log-likelihood over gamma.

    Candidates are a seeded Latin hypercube in log-gamma space; ``gamma0``, when given,
    replaces the first candidate. A bounded quasi-Newton ascent starts from the best one.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    lo, hi = hyper_bounds(training, default_scale)
    n_d = training.n_dim
    sampler = qmc.LatinHypercube(d=n_d, seed=np.random.default_rng(seed))
    cands = lo + sampler.random(n_starts) * (hi - lo)
    if gamma0 is not None:
        cands[0] = np.clip(np.log(np.asarray(gamma0, dtype=float)), lo, hi)

    def value(theta):
        try:
            return _lml(training, np.exp(2.0 * theta), condmax, False)[0]
        except NumericError:
            return -np.inf

    vals = np.array([value(c) for c in cands])
    i0 = int(np.argmax(vals))
    best_theta, best_val = cands[i0], vals[i0]

    def neg(theta):
        try:
            v, g = _lml(training, np.exp(2.0 * theta), condmax, True)
        except NumericError:
            return 1e300, np.zeros_like(theta)
        return -v, -g

    res = minimize(
        neg,
        best_theta,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={"maxiter": max_iter, "ftol": 1e-8},
    )
    if np.isfinite(res.fun) and -res.fun > best_val:
        best_theta = res.x
    return KernelParams(np.exp(best_theta))


class Posterior(NamedTuple):
    mu: float
    var: float
    mu_grad: np.ndarray
    var_grad: np.ndarray
    var_raw: float


@dataclass(frozen=True)
class GpModel:
    training: TrainingSet
    params: KernelParams
    beta: float
    sigK2: float
    eta: float
    P: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray = field(repr=False)

    def _fac(self):
        return _Factor(self.P, self.eta, self.chol)

    def _kvec(self, x):
        X = self.training.X
        s = self.params.gamma**2
        d = X - x
        k = np.exp(-0.5 * (d * d) @ s)
        u = d * s
        kg = np.concatenate([k, (-u * k[:, None]).T.ravel()])
        n_x, n_d = X.shape
        dk = np.empty((n_x * (n_d + 1), n_d))
        dk[:n_x] = u * k[:, None]
        blk = np.einsum("ij,a->iaj", np.diag(s), k) - np.einsum("ai,aj,a->iaj", u, u, k)
        dk[n_x:] = blk.reshape(n_x * n_d, n_d)
        return kg, dk

    def posterior(self, x) -> Posterior:
        """Posterior mean and variance at ``x`` and their exact gradients."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.training.n_dim:
            raise ValueError("point dimension does not match the model")
        kg, dk = self._kvec(x)
        mu = self.beta + kg @ self.alpha
        mu_grad = dk.T @ self.alpha
        v = linalg.solve_triangular(self.chol, kg / self.P, lower=True, check_finite=False)
        var_raw = self.sigK2 * (1.0 - v @ v)
        w = linalg.solve_triangular(self.chol.T, v, lower=False, check_finite=False) / self.P
        var_grad = -2.0 * self.sigK2 * (dk.T @ w)
        if var_raw <= 0.0:
            return Posterior(float(mu), 0.0, mu_grad, np.zeros_like(var_grad), float(var_raw))
        return Posterior(float(mu), float(var_raw), mu_grad, var_grad, float(var_raw))

    def mean(self, x) -> float:
        x = np.asarray(x, dtype=float).ravel()
        kg, _ = self._kvec(x)
        return float(self.beta + kg @ self.alpha)

    def mean_hessian(self, x) -> np.ndarray:
        """Hessian of the posterior mean at ``x``."""
        x = np.asarray(x, dtype=float).ravel()
        X = self.training.X
        n_x, n_d = X.shape
        s = self.params.gamma**2
        d = X - x
        k = np.exp(-0.5 * (d * d) @ s)
        u = d * s
        t = self.alpha[n_x:].reshape(n_d, n_x).T * s
        phi = self.alpha[:n_x] - np.sum(t * d, axis=1)
        H = np.einsum("a,ai,aj->ij", k * phi, u, u)
        ut = np.einsum("a,ai,aj->ij", k, u, t)
        H += ut + ut.T
        H -= np.diag(s) * np.sum(k * phi)
        return H

    def preconditioned_matrix(self) -> np.ndarray:
        """``P^-1 (Kg + eta W) P^-1``; the matrix whose Cholesky factor is stored."""
        return self.chol @ self.chol.T


def fit_gp(
    training: TrainingSet,
    params: KernelParams | None = None,
    condmax=CONDMAX,
    n_starts=N_HYPER_STARTS,
    seed=0,
    gamma0=None,
    default_scale=1.0,
) -> GpModel:
    """Fit a model, selecting hyperparameters by likelihood unless ``params`` is given."""
    if params is None:
        params = select_hyperparameters(
            training, condmax, n_starts, seed=seed, gamma0=gamma0, default_scale=default_scale
        )
    Kg = build_grad_kernel_matrix(training.X, params)
    fac = _factor(Kg, condmax)
    beta, sig2, a = _beta_sig(fac, training.f_grad, training.one_mod())
    return GpModel(
        training=training,
        params=params,
        beta=beta,
        sigK2=max(sig2, _TINY),
        eta=fac.eta,
        P=fac.P,
        chol=fac.L,
        alpha=a,
    )
