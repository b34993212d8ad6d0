"""Multi-start augmented-Lagrangian minimizer for the acquisition subproblems.

Each start runs an outer loop of multiplier updates around bounded L-BFGS-B
subproblems. Among the starts, the feasible solution with the lowest objective wins.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .trust import TrustState

FEAS_TOL = 1e-8
MAX_OUTER = 200
MAX_INNER = 50
MU_INIT = 10.0
MU_GROWTH = 10.0
MU_MAX = 1e12


class InnerSolverError(RuntimeError):
    """Every start of the subproblem failed to evaluate."""


@dataclass(frozen=True)
class Row:
    """A smooth scalar constraint ``fun(x) <= bound`` (``kind='ineq'``) or ``fun(x) == bound``.

    ``fun`` returns ``(value, gradient)``. ``scale`` divides the residual, so the
    feasibility tolerance applies to ``(value - bound) / scale``.
    """

    fun: Callable
    kind: str = "ineq"
    bound: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ineq", "eq"):
            raise ValueError("kind must be 'ineq' or 'eq'")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass
class InnerProblem:
    objective: Callable
    lb: np.ndarray
    ub: np.ndarray
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    rows: Sequence[Row] = field(default_factory=list)

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.asarray(self.ub, dtype=float).ravel()
        n = self.lb.size
        if self.ub.shape != self.lb.shape or np.any(self.lb > self.ub):
            raise ValueError("invalid bounds")
        self.A_ineq = np.zeros((0, n)) if self.A_ineq is None else np.atleast_2d(np.asarray(self.A_ineq, float))
        self.b_ineq = np.zeros(0) if self.b_ineq is None else np.asarray(self.b_ineq, float).ravel()
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.atleast_2d(np.asarray(self.A_eq, float))
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).ravel()
        if self.A_ineq.shape != (self.b_ineq.size, n) or self.A_eq.shape != (self.b_eq.size, n):
            raise ValueError("linear constraint shapes are inconsistent")
        self.rows = list(self.rows)

    @property
    def n_dim(self) -> int:
        return self.lb.size

    @property
    def n_constraints(self) -> int:
        return self.b_ineq.size + self.b_eq.size + len(self.rows)

    def constraints(self, x):
        """Scaled residuals, their gradients, and an equality mask over all rows."""
        n = x.size
        vals = [self.A_ineq @ x - self.b_ineq, self.A_eq @ x - self.b_eq]
        grads = [self.A_ineq, self.A_eq]
        for r in self.rows:
            v, g = r.fun(x)
            vals.append(np.atleast_1d((float(v) - r.bound) / r.scale))
            grads.append(np.reshape(g, (1, n)) / r.scale)
        is_eq = np.concatenate(
            [
                np.zeros(self.b_ineq.size, bool),
                np.ones(self.b_eq.size, bool),
                np.array([r.kind == "eq" for r in self.rows], dtype=bool),
            ]
        )
        return np.concatenate(vals), np.vstack(grads), is_eq


def _violation(c, is_eq) -> float:
    if c.size == 0:
        return 0.0
    return float(np.max(np.where(is_eq, np.abs(c), np.maximum(c, 0.0)), initial=0.0))


@dataclass
class InnerResult:
    x: np.ndarray
    value: float
    kkt_residual: float
    feasible: bool
    violation: float
    start_index: int

    def __iter__(self):
        # allows ``x, value, kkt, feasible = minimize(...)``
        return iter((self.x, self.value, self.kkt_residual, self.feasible))


def _projected_grad_norm(x, g, lb, ub) -> float:
    pg = np.where((x <= lb) & (g > 0), 0.0, g)
    pg = np.where((x >= ub) & (pg < 0), 0.0, pg)
    return float(np.max(np.abs(pg), initial=0.0))


def _solve_one(problem: InnerProblem, x0, max_outer, max_inner, tol):
    lb, ub = problem.lb, problem.ub
    bounds = list(zip(lb, ub))
    x = np.clip(np.asarray(x0, dtype=float).ravel(), lb, ub)

    if problem.n_constraints == 0:
        res = _scipy_minimize(
            problem.objective, x, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_inner * max_outer, "ftol": 1e-15, "gtol": 1e-12},
        )
        x = np.clip(res.x, lb, ub)
        f, g = problem.objective(x)
        return x, float(f), _projected_grad_norm(x, np.asarray(g, float), lb, ub), 0.0

    c, _, is_eq = problem.constraints(x)
    lam = np.zeros(c.size)
    mu = MU_INIT
    viol_prev = _violation(c, is_eq)

    def lagrangian(z):
        f, g = problem.objective(z)
        cz, Jz, _ = problem.constraints(z)
        shifted = lam + mu * cz
        w = np.where(is_eq, shifted, np.maximum(shifted, 0.0))
        val = f + float(np.sum(w * w - lam * lam)) / (2.0 * mu)
        return val, np.asarray(g, float) + w @ Jz

    kkt = np.inf
    n_stalled = 0
    for _ in range(max_outer):
        res = _scipy_minimize(
            lagrangian, x, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_inner, "ftol": 1e-15, "gtol": 1e-12},
        )
        x_new = np.clip(res.x, lb, ub)
        c, _, _ = problem.constraints(x_new)
        viol = _violation(c, is_eq)
        lam_new = np.where(is_eq, lam + mu * c, np.maximum(lam + mu * c, 0.0))
        step = float(np.max(np.abs(x_new - x), initial=0.0))
        dlam = float(np.max(np.abs(lam_new - lam), initial=0.0))
        kkt = _projected_grad_norm(x_new, np.asarray(res.jac, float), lb, ub)
        x, lam = x_new, lam_new
        lam_scale = 1.0 + float(np.max(np.abs(lam), initial=0.0))
        stalled = step <= 1e-14 * (1.0 + float(np.max(np.abs(x))))
        if viol <= tol and (stalled or (kkt <= 1e-8 * lam_scale and dlam <= 1e-8 * lam_scale)):
            break
        n_stalled = n_stalled + 1 if stalled else 0
        if n_stalled >= 3:
            break
        if viol > 0.25 * viol_prev and viol > tol:
            if mu >= MU_MAX:
                break
            mu = min(MU_MAX, mu * MU_GROWTH)
        viol_prev = viol
    f, _ = problem.objective(x)
    return x, float(f), kkt, _violation(problem.constraints(x)[0], is_eq)


def minimize(
    problem: InnerProblem,
    starts,
    max_iter: int = MAX_OUTER,
    tol: float = FEAS_TOL,
    max_inner: int = MAX_INNER,
) -> InnerResult:
    """Solve from every start; keep the best feasible solution (ties go to the earlier start).

    Feasible starts themselves are kept as candidates, so the returned objective never
    exceeds the objective at any feasible start.
    """
    starts = [np.asarray(s, dtype=float).ravel() for s in starts]
    if not starts:
        raise ValueError("at least one start is required")
    for s in starts:
        if s.shape != problem.lb.shape:
            raise ValueError("start has the wrong dimension")
        if np.any(s < problem.lb - 1e-12) or np.any(s > problem.ub + 1e-12):
            raise ValueError("starts must lie within the bounds")

    candidates = []
    for i, s in enumerate(starts):
        try:
            f0, _ = problem.objective(s)
            c0, _, is_eq = problem.constraints(s)
            v0 = _violation(c0, is_eq)
            if v0 <= tol and np.isfinite(f0):
                candidates.append((s.copy(), float(f0), np.inf, v0, i))
            x, f, kkt, viol = _solve_one(problem, s, max_iter, max_inner, tol)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(f) and np.all(np.isfinite(x)):
            candidates.append((x, f, kkt, viol, i))
    if not candidates:
        raise InnerSolverError("the subproblem could not be evaluated from any start")

    feasible = [c for c in candidates if c[3] <= tol]
    if feasible:
        x, f, kkt, viol, i = min(feasible, key=lambda c: (c[1], c[4]))
        return InnerResult(x, f, kkt, True, viol, i)
    x, f, kkt, viol, i = min(candidates, key=lambda c: (c[3], c[1], c[4]))
    return InnerResult(x, f, kkt, False, viol, i)


def default_starts(x_best, trust: TrustState, lb, ub, n_starts: int = 5, seed=0):
    """``x_best`` followed by seeded draws in the circular trust region, clipped to the box.

    Clipping is a projection onto a convex set containing ``x_best``, so clipped
    draws remain inside the trust circle.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    x_best = np.asarray(x_best, dtype=float).ravel()
    lb = np.asarray(lb, dtype=float).ravel()
    ub = np.asarray(ub, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    radius = np.sqrt(trust.ub_circle)
    n = x_best.size
    starts = [np.clip(x_best, lb, ub)]
    for _ in range(n_starts - 1):
        d = rng.standard_normal(n)
        d /= max(np.linalg.norm(d), 1e-300)
        r = radius * rng.uniform() ** (1.0 / n)
        starts.append(np.clip(x_best + r * d, lb, ub))
    return starts
