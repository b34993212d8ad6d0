"""Constrained-problem model, merit functions and closed-form exact-Lagrangian multipliers."""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

ALPHA1 = 100.0
ALPHA2 = 100.0
RHO_MERIT = 100.0
ACTIVE_THRESHOLD = -0.1

# each callable maps x -> (value, gradient)
ValueGrad = Callable[[np.ndarray], tuple]


@dataclass
class ConstrainedProblem:
    """``min f(x)`` over a box with linear rows and smooth nonlinear ``g(x) <= 0``, ``h(x) = 0``."""

    objective: ValueGrad
    lb: np.ndarray
    ub: np.ndarray
    g: Sequence[ValueGrad] = ()
    h: Sequence[ValueGrad] = ()
    Ag: np.ndarray | None = None
    bg: np.ndarray | None = None
    Ah: np.ndarray | None = None
    bh: np.ndarray | None = None

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.asarray(self.ub, dtype=float).ravel()
        if self.lb.shape != self.ub.shape:
            raise ValueError("lb and ub differ in length")
        if np.any(self.lb >= self.ub):
            raise ValueError("every lower bound must be strictly below its upper bound")
        n = self.lb.size
        self.Ag = np.zeros((0, n)) if self.Ag is None else np.atleast_2d(np.asarray(self.Ag, float))
        self.bg = np.zeros(0) if self.bg is None else np.asarray(self.bg, float).ravel()
        self.Ah = np.zeros((0, n)) if self.Ah is None else np.atleast_2d(np.asarray(self.Ah, float))
        self.bh = np.zeros(0) if self.bh is None else np.asarray(self.bh, float).ravel()
        if self.Ag.shape != (self.bg.size, n) or self.Ah.shape != (self.bh.size, n):
            raise ValueError("linear constraint shapes are inconsistent")
        self.g = list(self.g)
        self.h = list(self.h)

    @property
    def n_dim(self) -> int:
        return self.lb.size

    @property
    def n_g(self) -> int:
        return len(self.g)

    @property
    def n_h(self) -> int:
        return len(self.h)

    def evaluate(self, x):
        """Objective value, objective gradient and nonlinear constraint evaluation at ``x``."""
        x = np.asarray(x, dtype=float).ravel()
        f, df = self.objective(x)
        ev = ConstraintEval.from_callables(x, self.g, self.h)
        return float(f), np.asarray(df, dtype=float).ravel(), ev

    def linear_violation(self, x) -> float:
        x = np.asarray(x, dtype=float).ravel()
        viol = [np.max(np.maximum(self.lb - x, 0.0)), np.max(np.maximum(x - self.ub, 0.0))]
        if self.bg.size:
            viol.append(np.max(np.maximum(self.Ag @ x - self.bg, 0.0)))
        if self.bh.size:
            viol.append(np.max(np.abs(self.Ah @ x - self.bh)))
        return float(max(viol))


@dataclass
class ConstraintEval:
    g_vals: np.ndarray
    h_vals: np.ndarray
    g_grads: np.ndarray
    h_grads: np.ndarray

    def __post_init__(self):
        self.g_vals = np.asarray(self.g_vals, dtype=float).ravel()
        self.h_vals = np.asarray(self.h_vals, dtype=float).ravel()
        gg = np.asarray(self.g_grads, dtype=float)
        hg = np.asarray(self.h_grads, dtype=float)
        if self.g_vals.size:
            n_d = gg.size // self.g_vals.size
        elif self.h_vals.size:
            n_d = hg.size // self.h_vals.size
        else:
            n_d = gg.shape[-1] if gg.ndim == 2 else (hg.shape[-1] if hg.ndim == 2 else 0)
        self.g_grads = gg.reshape(self.g_vals.size, n_d)
        self.h_grads = hg.reshape(self.h_vals.size, n_d)

    @classmethod
    def from_callables(cls, x, g, h):
        n = x.size
        gv = [c(x) for c in g]
        hv = [c(x) for c in h]
        return cls(
            np.array([v for v, _ in gv], dtype=float),
            np.array([v for v, _ in hv], dtype=float),
            np.array([np.ravel(d) for _, d in gv], dtype=float).reshape(len(gv), n),
            np.array([np.ravel(d) for _, d in hv], dtype=float).reshape(len(hv), n),
        )

    @property
    def n_dim(self) -> int:
        return self.g_grads.shape[1]


@dataclass
class Multipliers:
    psi_g: np.ndarray
    psi_h: np.ndarray
    active_index_map: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def g_plus(vals):
    return np.maximum(np.asarray(vals, dtype=float), 0.0)


def merit_l2(f, ev: ConstraintEval, rho) -> float:
    if rho <= 0:
        raise ValueError("rho must be positive")
    return float(f + rho * (ev.h_vals @ ev.h_vals + np.sum(g_plus(ev.g_vals) ** 2)))


def merit_l2_grad(f_grad, ev: ConstraintEval, rho) -> np.ndarray:
    """Gradient of :func:`merit_l2` given the objective gradient."""
    return np.asarray(f_grad, float) + 2.0 * rho * (
        ev.h_vals @ ev.h_grads + g_plus(ev.g_vals) @ ev.g_grads
    )


def merit_aug_lagrangian(f, ev: ConstraintEval, psi_h, psi_g, rho) -> float:
    """Augmented Lagrangian with fixed multipliers."""
    psi_h = np.asarray(psi_h, dtype=float).ravel()
    psi_g = np.asarray(psi_g, dtype=float).ravel()
    if psi_h.size != ev.h_vals.size or psi_g.size != ev.g_vals.size:
        raise ValueError("multiplier lengths do not match the constraint vectors")
    g, h = ev.g_vals, ev.h_vals
    corr = np.minimum(0.0, psi_g / (2.0 * rho) + g)
    return float(f + psi_h @ h + psi_g @ g + rho * (h @ h + g @ g - corr @ corr))


def merit_aug_lagrangian_grad(f_grad, ev: ConstraintEval, psi_h, psi_g, rho) -> np.ndarray:
    """Gradient in ``x`` of :func:`merit_aug_lagrangian` with the multipliers held fixed."""
    g, h = ev.g_vals, ev.h_vals
    corr = np.minimum(0.0, np.asarray(psi_g) / (2.0 * rho) + g)
    wg = np.asarray(psi_g) + 2.0 * rho * (g - corr)
    wh = np.asarray(psi_h) + 2.0 * rho * h
    return np.asarray(f_grad, float) + wg @ ev.g_grads + wh @ ev.h_grads


def filter_active(g_vals, g_grads, threshold=ACTIVE_THRESHOLD):
    """Keep inequality rows with value ``>= threshold``.

    Returns the retained values, gradients and their indices in the input.
    """
    g_vals = np.asarray(g_vals, dtype=float).ravel()
    idx = np.flatnonzero(g_vals >= threshold)
    return g_vals[idx], np.asarray(g_grads, dtype=float)[idx], idx


def infeasibility(ev: ConstraintEval) -> float:
    """``w(x) = ||g+||^2 + ||h||^2``."""
    return float(np.sum(g_plus(ev.g_vals) ** 2) + ev.h_vals @ ev.h_vals)


def multiplier_matrix(ev: ConstraintEval, alpha1=ALPHA1, alpha2=ALPHA2) -> np.ndarray:
    """Symmetric positive (semi)definite matrix whose inverse gives the multipliers."""
    J = np.vstack([ev.g_grads, ev.h_grads])
    n_g = ev.g_vals.size
    M = J @ J.T
    diag = np.full(J.shape[0], alpha2 * infeasibility(ev))
    diag[:n_g] += alpha1 * ev.g_vals**2
    M[np.diag_indices_from(M)] += diag
    return 0.5 * (M + M.T)


def _cho(M):
    try:
        return linalg.cho_factor(M, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    n = M.shape[0]
    jitter = 1e-12 * np.trace(M) / n if np.trace(M) > 0 else 1e-12
    for _ in range(6):
        try:
            return linalg.cho_factor(M + jitter * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 100.0
    raise np.linalg.LinAlgError("multiplier matrix is not positive definite even with jitter")


def solve_multipliers(ev: ConstraintEval, f_grad, alpha1=ALPHA1, alpha2=ALPHA2) -> Multipliers:
    """Minimizer of the multiplier least-squares function ``psi_value``."""
    if alpha1 <= 0 or alpha2 <= 0:
        raise ValueError("alpha1 and alpha2 must be positive")
    n_g = ev.g_vals.size
    J = np.vstack([ev.g_grads, ev.h_grads])
    if J.shape[0] == 0:
        return Multipliers(np.zeros(0), np.zeros(0))
    M = multiplier_matrix(ev, alpha1, alpha2)
    psi = -linalg.cho_solve(_cho(M), J @ np.asarray(f_grad, float), check_finite=False)
    return Multipliers(psi[:n_g], psi[n_g:])


def psi_value(psi_g, psi_h, ev: ConstraintEval, f_grad, alpha1=ALPHA1, alpha2=ALPHA2) -> float:
    psi_g = np.asarray(psi_g, float).ravel()
    psi_h = np.asarray(psi_h, float).ravel()
    r = np.asarray(f_grad, float) + psi_g @ ev.g_grads + psi_h @ ev.h_grads
    Gp = ev.g_vals * psi_g
    w = infeasibility(ev)
    return float(r @ r + alpha1 * Gp @ Gp + alpha2 * w * (psi_h @ psi_h + psi_g @ psi_g))


def stack_all(problem: ConstrainedProblem, x, g_vals, g_grads, h_vals, h_grads) -> ConstraintEval:
    """Bounds, linear rows and the supplied nonlinear rows as one inequality/equality set.

    Inequalities are ordered ``[lb - x, x - ub, Ag x - bg, g]``; equalities ``[Ah x - bh, h]``.
    """
    x = np.asarray(x, dtype=float).ravel()
    eye = np.eye(x.size)
    gv = np.concatenate([problem.lb - x, x - problem.ub, problem.Ag @ x - problem.bg, g_vals])
    gg = np.vstack([-eye, eye, problem.Ag, np.reshape(g_grads, (-1, x.size))])
    hv = np.concatenate([problem.Ah @ x - problem.bh, h_vals])
    hg = np.vstack([problem.Ah, np.reshape(h_grads, (-1, x.size))])
    return ConstraintEval(gv, hv, gg, hg)


def exact_aug_lagrangian(f, f_grad, ev_all: ConstraintEval, rho, threshold, alpha1, alpha2):
    """Value of the exact augmented Lagrangian for already-stacked rows.

    Returns ``(value, multipliers, filtered_eval)``.
    """
    gv, gg, idx = filter_active(ev_all.g_vals, ev_all.g_grads, threshold)
    ev = ConstraintEval(gv, ev_all.h_vals, gg, ev_all.h_grads)
    mult = solve_multipliers(ev, f_grad, alpha1, alpha2)
    mult.active_index_map = idx
    return merit_aug_lagrangian(f, ev, mult.psi_h, mult.psi_g, rho), mult, ev


def merit_exact_aug_lagrangian(
    problem: ConstrainedProblem,
    x,
    rho=RHO_MERIT,
    threshold=ACTIVE_THRESHOLD,
    alpha1=ALPHA1,
    alpha2=ALPHA2,
    evaluation=None,
) -> float:
    """Reporting merit on the true problem.

    ``evaluation`` may carry a precomputed ``(f, f_grad, ConstraintEval)`` for ``x``.
    """
    x = np.asarray(x, dtype=float).ravel()
    f, df, ev = evaluation if evaluation is not None else problem.evaluate(x)
    ev_all = stack_all(problem, x, ev.g_vals, ev.g_grads, ev.h_vals, ev.h_grads)
    return exact_aug_lagrangian(f, df, ev_all, rho, threshold, alpha1, alpha2)[0]
