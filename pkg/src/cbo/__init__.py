"""Local gradient-enhanced Bayesian optimization with nonlinear constraints."""

from .constraints import ConstrainedProblem, merit_exact_aug_lagrangian
from .optimizer import BoConfig, run
from .problems import get_problem

__all__ = ["BoConfig", "ConstrainedProblem", "get_problem", "merit_exact_aug_lagrangian", "run"]
__version__ = "0.1.0"
