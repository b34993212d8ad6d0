"""Gaussian kernel and the cross-derivatives used by gradient-enhanced GPs.

Only the Gaussian kernel is provided. Every function takes ``gamma``, the
vector of inverse length scales, so that ``r_i = gamma_i * (x_i - y_i)``.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelParams:
    """Inverse length-scale hyperparameters, one strictly positive entry per dimension."""

    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if gamma.ndim != 1 or gamma.size == 0:
            raise ValueError("gamma must be a nonempty 1-D vector")
        if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0.0):
            raise ValueError(f"gamma entries must be finite and > 0, got {gamma}")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_dim(self) -> int:
        return self.gamma.size


def _check(x, y, params):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not (x.size == y.size == params.n_dim):
        raise ValueError(
            f"dimension mismatch: x has {x.size}, y has {y.size}, gamma has {params.n_dim}"
        )
    return x, y


def kernel_value(x, y, params: KernelParams) -> float:
    """Gaussian kernel ``exp(-||r||^2 / 2)``."""
    x, y = _check(x, y, params)
    r = params.gamma * (x - y)
    return float(np.exp(-0.5 * r @ r))


def kernel_derivatives(x, y, params: KernelParams):
    """Kernel value with its first derivatives in ``x`` and ``y`` and the mixed second derivative.

    Returns
    -------
    value : float
    d_dx : ndarray, shape (n_d,)
    d_dy : ndarray, shape (n_d,)
    d2_dxdy : ndarray, shape (n_d, n_d)
        ``d2_dxdy[i, j]`` is the derivative with respect to ``x_i`` and ``y_j``.
    """
    x, y = _check(x, y, params)
    s = params.gamma**2
    k = float(np.exp(-0.5 * np.sum(s * (x - y) ** 2)))
    a = s * (x - y)
    d_dx = -a * k
    d_dy = a * k
    d2 = k * (np.diag(s) - np.outer(a, a))
    return k, d_dx, d_dy, d2
