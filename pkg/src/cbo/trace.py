"""Per-evaluation records of an optimization run."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TraceRow:
    eval_index: int
    x: np.ndarray
    f: float
    g: np.ndarray
    h: np.ndarray
    merit: float
    best_merit: float
    stage: int | None
    tr_circle_ub: float
    tr_sigma_ub: float

    def __eq__(self, other):
        if not isinstance(other, TraceRow):
            return NotImplemented
        return (
            self.eval_index == other.eval_index
            and np.array_equal(self.x, other.x)
            and self.f == other.f
            and np.array_equal(self.g, other.g)
            and np.array_equal(self.h, other.h)
            and self.merit == other.merit
            and self.best_merit == other.best_merit
            and self.stage == other.stage
            and self.tr_circle_ub == other.tr_circle_ub
            and self.tr_sigma_ub == other.tr_sigma_ub
        )


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    problem: str = ""
    n_dim: int = 0
    method: str = ""
    run_index: int = 0
    tol: float = 1e-5
    converged: bool = False
    error: str | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def best_merits(self) -> np.ndarray:
        return np.array([r.best_merit for r in self.rows])

    @property
    def final_best_merit(self) -> float:
        return self.rows[-1].best_merit if self.rows else float("inf")

    def iterations_to_tol(self, tol: float | None = None) -> int | None:
        """First evaluation index whose best merit is below ``tol``."""
        tol = self.tol if tol is None else tol
        for r in self.rows:
            if r.best_merit < tol:
                return r.eval_index
        return None
