"""Circular and posterior-variance trust regions and their bound-update policy."""

from dataclasses import dataclass, replace

import numpy as np

from .gp import GpModel

SIGMA_UB_FLOOR = 1e-8


@dataclass(frozen=True)
class TrustPolicy:
    """Growth/shrink factors applied by :func:`update_bounds`."""

    circle_grow: float = 2.0
    circle_shrink: float = 2.0
    sigma_grow: float = 1.5
    sigma_shrink: float = 1.5
    sigma_floor: float = SIGMA_UB_FLOOR
    patience: int = 2

    def __post_init__(self):
        if min(self.circle_grow, self.circle_shrink, self.sigma_grow, self.sigma_shrink) <= 1.0:
            raise ValueError("growth and shrink factors must exceed 1")
        if not 0.0 < self.sigma_floor < 1.0:
            raise ValueError("sigma_floor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass(frozen=True)
class TrustState:
    ub_circle: float
    ub_sigma: float
    no_progress_count: int = 0
    last_active: tuple = (False, False)

    def __post_init__(self):
        if not self.ub_circle > 0:
            raise ValueError("ub_circle must be positive")
        if not 0.0 < self.ub_sigma <= 1.0:
            raise ValueError("ub_sigma must lie in (0, 1]")
        if self.no_progress_count < 0:
            raise ValueError("no_progress_count must be nonnegative")

    @classmethod
    def initial(cls, lb, ub, ub_sigma=0.5) -> "TrustState":
        """Circle radius a tenth of the box diagonal, sigma bound one half."""
        diag = float(np.linalg.norm(np.asarray(ub, float) - np.asarray(lb, float)))
        return cls(ub_circle=(0.1 * diag) ** 2, ub_sigma=ub_sigma)


def tr_circle(x, x_best):
    x = np.asarray(x, dtype=float).ravel()
    x_best = np.asarray(x_best, dtype=float).ravel()
    if x.shape != x_best.shape:
        raise ValueError("x and x_best differ in dimension")
    d = x - x_best
    return float(d @ d), 2.0 * d


def tr_sigma(f_model: GpModel, x):
    """Posterior variance normalized by the process variance, in ``[0, 1]``."""
    p = f_model.posterior(x)
    s = f_model.sigK2
    val = p.var / s
    grad = p.var_grad / s
    if val >= 1.0:
        return 1.0, np.zeros_like(grad)
    return float(val), grad


def update_bounds(
    state: TrustState,
    made_progress: bool,
    any_tr_active: bool,
    policy: TrustPolicy = TrustPolicy(),
) -> TrustState:
    if made_progress:
        if any_tr_active:
            return replace(
                state,
                ub_circle=state.ub_circle * policy.circle_grow,
                ub_sigma=min(1.0, state.ub_sigma * policy.sigma_grow),
                no_progress_count=0,
            )
        return replace(state, no_progress_count=0)
    count = state.no_progress_count + 1
    if count >= policy.patience:
        return replace(
            state,
            ub_circle=state.ub_circle / policy.circle_shrink,
            ub_sigma=max(policy.sigma_floor, state.ub_sigma / policy.sigma_shrink),
            no_progress_count=0,
        )
    return replace(state, no_progress_count=count)


def shrink(state: TrustState, policy: TrustPolicy = TrustPolicy()) -> TrustState:
    """Unconditional shrink, used when an acquisition subproblem fails."""
    return replace(
        state,
        ub_circle=state.ub_circle / policy.circle_shrink,
        ub_sigma=max(policy.sigma_floor, state.ub_sigma / policy.sigma_shrink),
        no_progress_count=0,
    )


def made_progress(previous_best: float, new_best: float, rel_tol=1e-12) -> bool:
    """Whether the best merit decreased by at least ``rel_tol`` relative."""
    return new_best < previous_best - rel_tol * max(abs(previous_best), np.finfo(float).tiny)


def is_active(value: float, bound: float, tol: float = 1e-6) -> bool:
    """Whether a ``value <= bound`` trust constraint is binding (relative tolerance)."""
    return bound - value <= tol * max(abs(bound), 1e-300)
