"""Analytic constrained benchmark problems with closed-form optima."""

from dataclasses import dataclass

import numpy as np

from .constraints import ConstrainedProblem, merit_exact_aug_lagrangian


@dataclass
class TestProblem(ConstrainedProblem):
    __test__ = False  # keep pytest from collecting this class

    name: str = ""
    x_opt: np.ndarray | None = None
    f_opt: float = 0.0


def quad_matrix(n_d):
    i = np.arange(n_d)
    return 0.1 * np.exp(-0.5 * (i[:, None] - i[None, :]) ** 2)


def min_eigenpair(A):
    w, V = np.linalg.eigh(A)
    u = V[:, 0]
    # fix the sign so the reported optimum is reproducible
    if u[np.argmax(np.abs(u))] < 0:
        u = -u
    return float(w[0]), u


def make_quadratic(n_d: int, radius: float = 2.0) -> TestProblem:
    """Centered quadratic shifted so the optimum on ``||x||^2 >= radius^2`` is zero."""
    if n_d < 2:
        raise ValueError("n_d must be >= 2")
    A = quad_matrix(n_d)
    lam, u = min_eigenpair(A)
    r2 = radius**2

    def objective(x):
        Ax = A @ x
        return float(x @ Ax - r2 * lam), 2.0 * Ax

    def g(x):
        return float(r2 - x @ x), -2.0 * x

    return TestProblem(
        objective=objective,
        lb=np.full(n_d, -10.0),
        ub=np.full(n_d, 10.0),
        g=[g],
        name="quad",
        x_opt=radius * u,
    )


def _prod_except(x):
    n = x.size
    left = np.concatenate([[1.0], np.cumprod(x[:-1])])
    right = np.concatenate([np.cumprod(x[::-1][:-1])[::-1], [1.0]])
    assert left.size == right.size == n
    return left * right


def make_product(n_d: int) -> TestProblem:
    """Product function on the unit sphere inside the unit box."""
    if n_d < 2:
        raise ValueError("n_d must be >= 2")
    c = float(n_d) ** (n_d / 2.0)

    def objective(x):
        return float(1.0 - c * np.prod(x)), -c * _prod_except(x)

    def h(x):
        return float(x @ x - 1.0), 2.0 * x

    return TestProblem(
        objective=objective,
        lb=np.zeros(n_d),
        ub=np.ones(n_d),
        h=[h],
        name="prod",
        x_opt=np.full(n_d, n_d**-0.5),
    )


def rosenbrock(x, a=100.0):
    x = np.asarray(x, dtype=float)
    t = x[1:] - x[:-1] ** 2
    val = float(np.sum(a * t**2 + (1.0 - x[:-1]) ** 2))
    grad = np.zeros_like(x)
    grad[:-1] = -4.0 * a * t * x[:-1] - 2.0 * (1.0 - x[:-1])
    grad[1:] += 2.0 * a * t
    return val, grad


def make_rosenbrock(n_d: int, a: float = 100.0) -> TestProblem:
    """Rosenbrock function with ``||x||^2 <= n_d``; the optimum sits on the constraint."""
    if n_d < 2:
        raise ValueError("n_d must be >= 2")
    if a <= 0:
        raise ValueError("a must be positive")

    def g(x):
        return float(x @ x - n_d), 2.0 * x

    return TestProblem(
        objective=lambda x: rosenbrock(x, a),
        lb=np.full(n_d, -10.0),
        ub=np.full(n_d, 10.0),
        g=[g],
        name="rosen",
        x_opt=np.ones(n_d),
    )


PROBLEMS = {"quad": make_quadratic, "prod": make_product, "rosen": make_rosenbrock}


def get_problem(name: str, n_d: int, **kwargs) -> TestProblem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(n_d, **kwargs)


def analytic_merit_at_optimum(problem: TestProblem, rho=100.0) -> float:
    if problem.x_opt is None:
        raise ValueError("problem has no analytic optimum")
    return merit_exact_aug_lagrangian(problem, problem.x_opt, rho=rho)
