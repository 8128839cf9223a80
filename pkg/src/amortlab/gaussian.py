"""Diagonal and dense Gaussian containers plus the small linear algebra kernel.

Everything downstream (variational states, oracles, the ELBO estimator) is built
on these types. Densities are always evaluated in log space; standard deviations
are carried as log_std so that unconstrained optimization is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular, solveh_banded

LOG_2PI = float(np.log(2.0 * np.pi))

# Cholesky pivot smaller than this times the largest diagonal entry counts as
# a failure, not as numerical luck.
SPD_PIVOT_RTOL = 1e-12

__all__ = [
    "LOG_2PI",
    "NotSPDError",
    "DiagGaussian",
    "DenseGaussian",
    "SymTridiag",
    "diag_log_density",
    "reparam_sample",
    "spd_cholesky",
    "spd_solve",
    "spd_inverse_diagonal",
    "sherman_morrison_inverse",
    "tridiag_solve",
]


class NotSPDError(ValueError):
    """A matrix that had to be symmetric positive definite is not."""


@dataclass
class DiagGaussian:
    """Independent Gaussian with parameters (mean, log_std) per dimension.

    Parameters
    ----------
    mean : (d,) array
    log_std : (d,) array
        Log standard deviations; any finite float is a valid value.
    """

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.mean.shape != self.log_std.shape or self.mean.ndim != 1:
            raise ValueError(
                f"mean and log_std must be 1-d and equal length, got "
                f"{self.mean.shape} vs {self.log_std.shape}"
            )
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_std))):
            raise ValueError("DiagGaussian parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)


def diag_log_density(g: DiagGaussian, point: np.ndarray) -> float:
    """Log density of `g` at `point`.

    Accepts a single point of shape (d,). A zero-dimensional Gaussian has
    log density 0 (empty product).
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (g.dim,):
        raise ValueError(f"point has shape {point.shape}, expected ({g.dim},)")
    u = (point - g.mean) * np.exp(-g.log_std)
    return float(np.sum(-0.5 * LOG_2PI - g.log_std - 0.5 * u * u))


def reparam_sample(g: DiagGaussian, noise: np.ndarray) -> np.ndarray:
    """Location-scale transform mean + exp(log_std) * noise.

    `noise` has shape (..., d); the output matches it. Deterministic in the
    noise, which is what makes pathwise gradients exact.
    """
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1:] != (g.dim,):
        raise ValueError(f"noise last dim {noise.shape} incompatible with dim {g.dim}")
    return g.mean + np.exp(g.log_std) * noise


@dataclass
class DenseGaussian:
    """Multivariate Gaussian stored as (mean, precision).

    The precision must be symmetric (checked at 1e-12 relative tolerance) and
    positive definite (checked at construction via Cholesky).
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.precision = np.asarray(self.precision, dtype=float)
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.precision.shape != (d, d):
            raise ValueError("mean must be (d,), precision (d, d)")
        scale = np.max(np.abs(self.precision)) if d else 0.0
        if scale and np.max(np.abs(self.precision - self.precision.T)) > 1e-12 * scale:
            raise ValueError("precision is not symmetric within 1e-12 relative tolerance")
        if d:
            spd_cholesky(self.precision)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def covariance(self) -> np.ndarray:
        L = spd_cholesky(self.precision)
        inv_l = solve_triangular(L, np.eye(self.dim), lower=True)
        return inv_l.T @ inv_l

    def marginal_variances(self) -> np.ndarray:
        return spd_inverse_diagonal(self.precision)


@dataclass
class SymTridiag:
    """Symmetric tridiagonal matrix as (diag, offdiag) bands."""

    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        self.offdiag = np.asarray(self.offdiag, dtype=float)
        if self.offdiag.shape[0] != max(self.diag.shape[0] - 1, 0):
            raise ValueError("offdiag must have length len(diag) - 1")

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    def to_dense(self) -> np.ndarray:
        a = np.diag(self.diag)
        n = self.dim
        idx = np.arange(n - 1)
        a[idx, idx + 1] = self.offdiag
        a[idx + 1, idx] = self.offdiag
        return a


def spd_cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises
    ------
    NotSPDError
        If the factorization fails or any pivot is <= 1e-12 times the largest
        diagonal entry of `a`.
    """
    a = np.asarray(a, dtype=float)
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(f"matrix is not positive definite: {exc}") from exc
    if a.shape[0]:
        pivots = np.diag(L) ** 2
        if np.min(pivots) <= SPD_PIVOT_RTOL * np.max(np.diag(a)):
            raise NotSPDError("Cholesky pivot below 1e-12 of the max diagonal entry")
    return L


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for symmetric positive definite `a` via Cholesky."""
    L = spd_cholesky(a)
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, y, lower=False)


def spd_inverse_diagonal(a: np.ndarray) -> np.ndarray:
    """Diagonal of a^{-1} for symmetric positive definite `a`.

    Uses inv(a) = inv(L)^T inv(L), so the diagonal is the squared column norms
    of inv(L); no full inverse is stored beyond one triangular matrix.
    """
    a = np.asarray(a, dtype=float)
    L = spd_cholesky(a)
    inv_l = solve_triangular(L, np.eye(a.shape[0]), lower=True)
    return np.sum(inv_l * inv_l, axis=0)


def sherman_morrison_inverse(beta: float, alpha: float, n: int) -> np.ndarray:
    """Closed-form inverse of beta * I + alpha * ones * ones^T.

    (beta I + alpha 11^T)^{-1} = beta^{-1} I - (alpha beta^{-1} / (beta + n alpha)) 11^T.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if beta == 0.0 or beta + n * alpha == 0.0:
        raise ValueError("matrix is singular: beta = 0 or beta + n * alpha = 0")
    eye = np.eye(n) / beta
    return eye - (alpha / beta / (beta + n * alpha)) * np.ones((n, n))


def tridiag_solve(t: SymTridiag, b: np.ndarray) -> np.ndarray:
    """Solve t x = b for a symmetric positive definite tridiagonal `t`."""
    n = t.dim
    ab = np.zeros((2, n))
    ab[0, 1:] = t.offdiag
    ab[1] = t.diag
    try:
        return solveh_banded(ab, b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises rarely
        raise NotSPDError(f"banded solve failed: {exc}") from exc
