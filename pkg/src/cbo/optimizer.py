"""Local Bayesian optimization loop for nonlinearly constrained problems."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import acquisition as acq
from .constraints import ConstrainedProblem, ConstraintEval, merit_exact_aug_lagrangian
from .gp import CONDMAX, N_HYPER_STARTS, GpModel, TrainingSet, fit_gp
from .inner_solver import InnerProblem, InnerSolverError, Row, default_starts, minimize
from .trace import RunTrace, TraceRow
from .trust import (
    TrustPolicy,
    TrustState,
    is_active,
    made_progress,
    shrink,
    tr_circle,
    tr_sigma,
    update_bounds,
)

METHODS = ("exact_lagrangian", "strong", "l2_penalty", "cei", "cuc")
REPORT_RHO = 100.0


class RunError(RuntimeError):
    """The loop could not produce a next point."""


@dataclass(frozen=True)
class BoConfig:
    method: str = "strong"
    omega: float = 0.0
    rho1: float = 100.0
    rho2: float = 100.0
    eps_g: float = -0.1
    eps_l2: float = 1.0
    nu1: float = 10.0
    nu2: float = 1.0
    data_region_size: int = 20
    min_recent: int = 3
    stage1_until: int = 10
    condmax: float = CONDMAX
    n_hyper_starts: int = N_HYPER_STARTS
    n_acq_starts: int = 5
    max_evals: int = 300
    merit_tol: float = 1e-5
    seed: int = 0
    trust_policy: TrustPolicy = field(default_factory=TrustPolicy)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        positive = ("rho1", "rho2", "eps_l2", "nu1", "nu2", "condmax", "merit_tol")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        for name in ("data_region_size", "n_hyper_starts", "n_acq_starts", "max_evals"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.min_recent < 0 or self.min_recent > self.data_region_size:
            raise ValueError("min_recent must lie in [0, data_region_size]")
        if self.condmax <= 1:
            raise ValueError("condmax must exceed 1")

    def validate_for(self, problem: ConstrainedProblem):
        if self.method in ("cei", "cuc") and (problem.n_h or problem.bh.size):
            raise acq.UnsupportedMethodError(
                f"method {self.method!r} cannot handle equality constraints"
            )


@dataclass
class EvalRecord:
    x: np.ndarray
    f: float
    df: np.ndarray
    ev: ConstraintEval
    merit: float


@dataclass
class BoState:
    history: list
    best_index: int
    trust: TrustState
    iteration: int = 0
    gammas: dict = field(default_factory=dict)

    @property
    def x_best(self) -> np.ndarray:
        return self.history[self.best_index].x

    @property
    def best_merit(self) -> float:
        return self.history[self.best_index].merit


@dataclass
class StepResult:
    x: np.ndarray
    stage: int | None
    tr_active: bool
    feasible: bool


def sigmoid(z, nu1=10.0, nu2=1.0) -> float:
    """``(nu1 z)^nu2 / ((nu1 z)^nu2 + 1)`` for ``z >= 0``."""
    if z <= 0:
        return 0.0
    # written as a logistic in log space so huge arguments saturate instead of overflowing
    return float(0.5 * (1.0 + np.tanh(0.5 * nu2 * np.log(nu1 * z))))


def select_data_region(history_x, x_best, size=20, min_recent=3) -> list:
    """Indices of the points used to fit the surrogates.

    The ``size`` nearest points to ``x_best`` (ties to the lower index), with the latest
    ``min_recent`` points always included and exact duplicates dropped.
    """
    X = np.atleast_2d(np.asarray(history_x, dtype=float))
    n = X.shape[0]
    if n == 0:
        raise ValueError("history is empty")
    x_best = np.asarray(x_best, dtype=float).ravel()
    # keep the first occurrence of every distinct point
    seen, unique = set(), []
    for i in range(n):
        key = X[i].tobytes()
        if key not in seen:
            seen.add(key)
            unique.append(i)
    if len(unique) <= size:
        return unique
    dist = np.sum((X[unique] - x_best) ** 2, axis=1)
    order = [unique[j] for j in np.lexsort((unique, dist))]
    best_i = order[0]
    unique_set = set(unique)
    recent = []  # newest first
    for i in range(n - 1, -1, -1):
        if len(recent) >= min_recent:
            break
        if i in unique_set:
            recent.append(i)
    # the best point always gets a slot; if that overflows, the oldest recent point yields
    forced = ([best_i] + [i for i in recent if i != best_i])[:size]
    chosen = list(forced)
    for i in order:
        if len(chosen) >= size:
            break
        if i not in chosen:
            chosen.append(i)
    return sorted(chosen)


def _fit_models(problem, state: BoState, idx, config: BoConfig, box_scale):
    X = np.array([state.history[i].x for i in idx])
    recs = [state.history[i] for i in idx]

    def fit(key, values, grads, k):
        seed = np.random.SeedSequence([config.seed, state.iteration, k]).generate_state(1)[0]
        model = fit_gp(
            TrainingSet.from_arrays(X, values, grads),
            condmax=config.condmax,
            n_starts=config.n_hyper_starts,
            seed=int(seed),
            gamma0=state.gammas.get(key),
            default_scale=box_scale,
        )
        state.gammas[key] = model.params.gamma
        return model

    f_model = fit("f", [r.f for r in recs], [r.df for r in recs], 0)
    g_models = [
        fit(("g", j), [r.ev.g_vals[j] for r in recs], [r.ev.g_grads[j] for r in recs], 1 + j)
        for j in range(problem.n_g)
    ]
    h_models = [
        fit(("h", j), [r.ev.h_vals[j] for r in recs], [r.ev.h_grads[j] for r in recs], 1 + problem.n_g + j)
        for j in range(problem.n_h)
    ]
    return acq.SurrogateBundle(f_model, g_models, h_models)


def _trust_rows(bundle: acq.SurrogateBundle, x_best, trust: TrustState):
    circle = Row(lambda x: tr_circle(x, x_best), "ineq", trust.ub_circle, trust.ub_circle)
    sigma = Row(lambda x: tr_sigma(bundle.f_model, x), "ineq", trust.ub_sigma, trust.ub_sigma)
    return [circle, sigma]


def _base_problem(problem: ConstrainedProblem, objective, rows):
    return InnerProblem(
        objective=objective,
        lb=problem.lb,
        ub=problem.ub,
        A_ineq=problem.Ag,
        b_ineq=problem.bg,
        A_eq=problem.Ah,
        b_eq=problem.bh,
        rows=rows,
    )


def _uc(config):
    return lambda b, x: acq.acq_uc(b, x, config.omega)


def _strong_stage(bundle, x_best, n_x, config: BoConfig):
    """Stage number and the extra surrogate rows for the staged enforcement."""
    if n_x < config.stage1_until:
        return 1, []
    q_best, _ = acq.acq_l2_penalty(bundle, x_best)
    if q_best >= config.eps_l2:
        ub = sigmoid(q_best, config.nu1, config.nu2) * q_best
        row = Row(lambda x: acq.acq_l2_penalty(bundle, x), "ineq", ub, max(ub, 1.0))
        return 2, [row]
    p = bundle.predict(x_best)
    rows = []
    for i in range(p.mu_g.size):
        gp = max(float(p.mu_g[i]), 0.0)
        ub = sigmoid(gp, config.nu1, config.nu2) * gp
        rows.append(Row(_g_row(bundle, i), "ineq", ub, max(ub, 1.0)))
    for i in range(p.mu_h.size):
        ha = abs(float(p.mu_h[i]))
        ub = sigmoid(ha, config.nu1, config.nu2) * ha
        if ub == 0.0:
            rows.append(Row(_h_row(bundle, i, 1.0), "eq", 0.0, 1.0))
        else:
            rows.append(Row(_h_row(bundle, i, 1.0), "ineq", ub, max(ub, 1.0)))
            rows.append(Row(_h_row(bundle, i, -1.0), "ineq", ub, max(ub, 1.0)))
    return 3, rows


def _g_row(bundle, i):
    def fun(x):
        p = bundle.predict(x)
        return float(p.mu_g[i]), p.dmu_g[i]

    return fun


def _h_row(bundle, i, sign):
    def fun(x):
        p = bundle.predict(x)
        return sign * float(p.mu_h[i]), sign * p.dmu_h[i]

    return fun


def _acquisition(problem, bundle, state: BoState, config: BoConfig, n_x):
    """Objective, extra rows and stage for the configured method."""
    x_best = state.x_best
    if config.method == "exact_lagrangian":

        def q(x):
            v1, g1 = acq.acq_exact_lagrangian(bundle, problem, x, config.rho1, config.eps_g)
            v2, g2 = acq.acq_exploration(bundle, x)
            return v1 + config.rho2 * v2, g1 + config.rho2 * g2

        return q, [], None
    if config.method == "strong":
        stage, rows = _strong_stage(bundle, x_best, n_x, config)
        return (lambda x: acq.acq_strong_default(bundle, x, config.omega)), rows, stage
    if config.method == "l2_penalty":
        return (lambda x: acq.acq_l2_uc(bundle, x, config.omega)), [], None
    f_best = state.history[state.best_index].f
    if config.method == "cei":
        return (lambda x: acq.acq_cei(bundle, x, f_best)), [], None
    return (lambda x: acq.acq_cuc(bundle, x, config.omega)), [], None


def propose(problem, state: BoState, config: BoConfig) -> StepResult:
    """Fit surrogates on the data region and minimize the acquisition once."""
    idx = select_data_region(
        [r.x for r in state.history], state.x_best, config.data_region_size, config.min_recent
    )
    box_scale = float(np.mean(problem.ub - problem.lb))
    bundle = _fit_models(problem, state, idx, config, box_scale)
    objective, extra_rows, stage = _acquisition(problem, bundle, state, config, len(idx))

    trust = state.trust
    for attempt in range(2):
        rows = _trust_rows(bundle, state.x_best, trust) + extra_rows
        inner = _base_problem(problem, objective, rows)
        seed = np.random.SeedSequence([config.seed, state.iteration, 1000 + attempt])
        starts = default_starts(
            state.x_best, trust, problem.lb, problem.ub, config.n_acq_starts,
            seed=np.random.default_rng(seed),
        )
        try:
            res = minimize(inner, starts)
        except InnerSolverError as exc:
            if attempt == 1:
                raise RunError(f"acquisition minimization failed twice: {exc}") from exc
            trust = shrink(trust, config.trust_policy)
            state.trust = trust
            continue
        c_val, _ = tr_circle(res.x, state.x_best)
        s_val, _ = tr_sigma(bundle.f_model, res.x)
        active = is_active(c_val, trust.ub_circle) or is_active(s_val, trust.ub_sigma)
        return StepResult(res.x, stage, active, res.feasible)
    raise AssertionError("unreachable")


def _evaluate(problem: ConstrainedProblem, x) -> EvalRecord:
    f, df, ev = problem.evaluate(x)
    merit = merit_exact_aug_lagrangian(problem, x, rho=REPORT_RHO, evaluation=(f, df, ev))
    return EvalRecord(np.array(x, dtype=float), f, df, ev, merit)


def run(problem: ConstrainedProblem, x0, config: BoConfig = BoConfig(), name: str = "") -> RunTrace:
    """Optimize from ``x0`` until the best merit drops below ``merit_tol`` or the budget ends."""
    config.validate_for(problem)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != problem.lb.shape:
        raise ValueError("x0 has the wrong dimension")
    if np.any(x0 < problem.lb) or np.any(x0 > problem.ub):
        raise ValueError("x0 must lie within the bounds")

    trace = RunTrace(
        problem=name or getattr(problem, "name", ""),
        n_dim=problem.n_dim,
        method=config.method,
        tol=config.merit_tol,
    )
    trust = TrustState.initial(problem.lb, problem.ub)
    state = None
    x, stage = x0, None
    for k in range(config.max_evals):
        ub_c, ub_s = trust.ub_circle, trust.ub_sigma
        try:
            rec = _evaluate(problem, x)
        except Exception as exc:  # user callables may raise anything
            trace.error = f"evaluation failed at eval {k + 1}: {exc}"
            return trace
        if state is None:
            state = BoState([rec], 0, trust)
        else:
            prev_best = state.best_merit
            state.history.append(rec)
            if rec.merit < state.best_merit:
                state.best_index = len(state.history) - 1
            progress = made_progress(prev_best, state.best_merit)
            state.trust = update_bounds(state.trust, progress, step.tr_active, config.trust_policy)
        trace.rows.append(
            TraceRow(
                eval_index=k + 1,
                x=rec.x.copy(),
                f=rec.f,
                g=rec.ev.g_vals.copy(),
                h=rec.ev.h_vals.copy(),
                merit=rec.merit,
                best_merit=state.best_merit,
                stage=stage,
                tr_circle_ub=ub_c,
                tr_sigma_ub=ub_s,
            )
        )
        if state.best_merit < config.merit_tol:
            trace.converged = True
            return trace
        if k + 1 == config.max_evals:
            break
        state.iteration = k + 1
        try:
            step = propose(problem, state, config)
        except RunError as exc:
            trace.error = str(exc)
            return trace
        trust = state.trust
        x, stage = np.clip(step.x, problem.lb, problem.ub), step.stage
    return trace


def with_overrides(config: BoConfig, **kwargs) -> BoConfig:
    return replace(config, **kwargs)
