"""Acquisition functions over a bundle of objective and constraint surrogates.

Every acquisition is written in minimization form and returns ``(value, gradient)``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .constraints import (
    ACTIVE_THRESHOLD,
    ALPHA1,
    ALPHA2,
    ConstrainedProblem,
    ConstraintEval,
    _cho,
    filter_active,
    g_plus,
    merit_aug_lagrangian,
    multiplier_matrix,
    stack_all,
)
from .gp import GpModel

SIGMA_FLOOR = 1e-12
PENALTY_WEIGHT = 1e2


class UnsupportedMethodError(ValueError):
    """The acquisition cannot represent the problem's constraints."""


@dataclass
class Prediction:
    mu_f: float
    var_f: float
    dmu_f: np.ndarray
    dvar_f: np.ndarray
    mu_g: np.ndarray
    var_g: np.ndarray
    dmu_g: np.ndarray
    dvar_g: np.ndarray
    mu_h: np.ndarray
    var_h: np.ndarray
    dmu_h: np.ndarray
    dvar_h: np.ndarray


def _sd(var, dvar):
    """Standard deviation and its gradient from a variance (scalar or per-row)."""
    sd = np.sqrt(np.maximum(var, 0.0))
    denom = 2.0 * np.maximum(sd, SIGMA_FLOOR)
    return sd, dvar / (denom[..., None] if np.ndim(sd) else denom)


@dataclass
class SurrogateBundle:
    """Objective and constraint surrogates fitted on the same points.

    Predictions are memoized for the most recent point, so evaluating several
    acquisitions and constraint rows at one ``x`` costs one posterior pass per model.
    """

    f_model: GpModel
    g_models: list = field(default_factory=list)
    h_models: list = field(default_factory=list)

    def __post_init__(self):
        self._key = None
        self._pred = None

    @property
    def n_dim(self) -> int:
        return self.f_model.training.n_dim

    def predict(self, x) -> Prediction:
        x = np.asarray(x, dtype=float).ravel()
        key = x.tobytes()
        if key == self._key:
            return self._pred
        n = x.size
        pf = self.f_model.posterior(x)

        def stack(models):
            ps = [m.posterior(x) for m in models]
            return (
                np.array([p.mu for p in ps]),
                np.array([p.var for p in ps]),
                np.array([p.mu_grad for p in ps]).reshape(len(ps), n),
                np.array([p.var_grad for p in ps]).reshape(len(ps), n),
            )

        pred = Prediction(pf.mu, pf.var, pf.mu_grad, pf.var_grad, *stack(self.g_models), *stack(self.h_models))
        self._key, self._pred = key, pred
        return pred


def acq_uc(bundle: SurrogateBundle, x, omega=0.0):
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    p = bundle.predict(x)
    if omega == 0.0:
        return p.mu_f, p.dmu_f.copy()
    sd, dsd = _sd(p.var_f, p.dvar_f)
    return p.mu_f - omega * sd, p.dmu_f - omega * dsd


def expected_improvement(mu, sd, f_best):
    """Negated expected improvement with partial derivatives in ``mu`` and ``sd``."""
    if sd <= SIGMA_FLOOR:
        imp = f_best - mu
        return -max(imp, 0.0), (1.0 if imp > 0 else 0.0), 0.0
    z = (f_best - mu) / sd
    cdf, pdf = norm.cdf(z), norm.pdf(z)
    return -(f_best - mu) * cdf - sd * pdf, cdf, -pdf


def acq_ei(bundle: SurrogateBundle, x, f_best):
    p = bundle.predict(x)
    sd, dsd = _sd(p.var_f, p.dvar_f)
    val, d_mu, d_sd = expected_improvement(p.mu_f, sd, f_best)
    return val, d_mu * p.dmu_f + d_sd * dsd


def acq_l2_penalty(bundle: SurrogateBundle, x):
    p = bundle.predict(x)
    gp = g_plus(p.mu_g)
    val = float(p.mu_h @ p.mu_h + gp @ gp)
    grad = 2.0 * (p.mu_h @ p.dmu_h + gp @ p.dmu_g)
    return val, np.asarray(grad, dtype=float).reshape(bundle.n_dim)


def _require_inequality_only(bundle):
    if bundle.h_models:
        raise UnsupportedMethodError(
            "probability of feasibility is undefined for equality constraints"
        )


def _pof(bundle, x):
    _require_inequality_only(bundle)
    p = bundle.predict(x)
    n = bundle.n_dim
    if p.mu_g.size == 0:
        return 1.0, np.zeros(n)
    sd, dsd = _sd(p.var_g, p.dvar_g)
    sd_safe = np.maximum(sd, SIGMA_FLOOR)
    z = -p.mu_g / sd_safe
    probs = norm.cdf(z)
    dz = -p.dmu_g / sd_safe[:, None] + (p.mu_g / sd_safe**2)[:, None] * dsd
    dprob = norm.pdf(z)[:, None] * dz
    total = float(np.prod(probs))
    grad = np.zeros(n)
    for i in range(probs.size):
        grad += np.prod(np.delete(probs, i)) * dprob[i]
    return total, grad


def prob_feasibility(bundle: SurrogateBundle, x) -> float:
    """Product over inequality surrogates of ``P(g_i(x) <= 0)``."""
    return _pof(bundle, x)[0]


def acq_cei(bundle: SurrogateBundle, x, f_best):
    pv, pg = _pof(bundle, x)
    q, dq = acq_ei(bundle, x, f_best)
    return q * pv, dq * pv + q * pg


def acq_cuc(bundle: SurrogateBundle, x, omega=0.0):
    pv, pg = _pof(bundle, x)
    q, dq = acq_uc(bundle, x, omega)
    return q * pv, dq * pv + q * pg


def acq_exploration(bundle: SurrogateBundle, x):
    """Penalty on surrogate constraints whose mean exceeds their standard deviation."""
    p = bundle.predict(x)
    n = bundle.n_dim
    val, grad = 0.0, np.zeros(n)
    if p.mu_g.size:
        sd, dsd = _sd(p.var_g, p.dvar_g)
        e = np.maximum(p.mu_g - sd, 0.0)
        val += float(e @ e)
        grad += 2.0 * e @ (p.dmu_g - dsd)
    if p.mu_h.size:
        sd, dsd = _sd(p.var_h, p.dvar_h)
        e = np.maximum(np.abs(p.mu_h) - sd, 0.0)
        val += float(e @ e)
        grad += 2.0 * e @ (np.sign(p.mu_h)[:, None] * p.dmu_h - dsd)
    return val, grad


def acq_strong_default(bundle: SurrogateBundle, x, omega=0.0):
    """``q_UC + 100 q_mu2 + 100 q_Exp``, the default objective of the staged method."""
    parts = [acq_uc(bundle, x, omega), acq_l2_penalty(bundle, x), acq_exploration(bundle, x)]
    w = (1.0, PENALTY_WEIGHT, PENALTY_WEIGHT)
    return sum(wi * v for wi, (v, _) in zip(w, parts)), sum(wi * g for wi, (_, g) in zip(w, parts))


def acq_l2_uc(bundle: SurrogateBundle, x, omega=0.0):
    """``q_UC + 100 q_mu2``."""
    v1, g1 = acq_uc(bundle, x, omega)
    v2, g2 = acq_l2_penalty(bundle, x)
    return v1 + PENALTY_WEIGHT * v2, g1 + PENALTY_WEIGHT * g2


def acq_exact_lagrangian(
    bundle: SurrogateBundle,
    problem: ConstrainedProblem,
    x,
    rho=100.0,
    threshold=ACTIVE_THRESHOLD,
    alpha1=ALPHA1,
    alpha2=ALPHA2,
):
    """Exact augmented Lagrangian built from the surrogate means.

    The gradient includes the dependence of the multipliers on ``x`` (through the
    surrogate mean Hessians), so it is exact away from the activity-filter switch.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    p = bundle.predict(x)
    n_lin_g = 2 * n + problem.bg.size
    n_lin_h = problem.bh.size
    ev_all = stack_all(problem, x, p.mu_g, p.dmu_g, p.mu_h, p.dmu_h)
    cg, Jg, idx = filter_active(ev_all.g_vals, ev_all.g_grads, threshold)
    ch, Jh = ev_all.h_vals, ev_all.h_grads
    ev = ConstraintEval(cg, ch, Jg, Jh)
    df = p.dmu_f
    n_G = cg.size
    J = np.vstack([Jg, Jh])
    if J.shape[0] == 0:
        return p.mu_f, df.copy()

    M = multiplier_matrix(ev, alpha1, alpha2)
    fac = _cho(M)
    psi = -linalg.cho_solve(fac, J @ df, check_finite=False)
    psi_g, psi_h = psi[:n_G], psi[n_G:]
    val = merit_aug_lagrangian(p.mu_f, ev, psi_h, psi_g, rho)

    m = np.minimum(0.0, psi_g / (2.0 * rho) + cg)
    grad = df + Jh.T @ (psi_h + 2.0 * rho * ch) + Jg.T @ (psi_g + 2.0 * rho * (cg - m))

    # multiplier sensitivity by the adjoint of M psi = -J df
    dq_dpsi = np.concatenate([cg - m, ch])
    lam = linalg.cho_solve(fac, dq_dpsi, check_finite=False)
    Jt_lam = J.T @ lam
    v = df + J.T @ psi
    hess_rows = []  # (row position, Hessian) for surrogate rows only
    for pos, orig in enumerate(idx):
        if orig >= n_lin_g:
            hess_rows.append((pos, bundle.g_models[orig - n_lin_g].mean_hessian(x)))
    for j, model in enumerate(bundle.h_models):
        hess_rows.append((n_G + n_lin_h + j, model.mean_hessian(x)))
    corr = bundle.f_model.mean_hessian(x) @ Jt_lam
    for pos, H in hess_rows:
        corr += lam[pos] * (H @ v) + psi[pos] * (H @ Jt_lam)
    corr += 2.0 * alpha1 * Jg.T @ (lam[:n_G] * cg * psi_g)
    dw = 2.0 * (Jg.T @ g_plus(cg) + Jh.T @ ch)
    corr += alpha2 * (lam @ psi) * dw
    return val, grad - corr
