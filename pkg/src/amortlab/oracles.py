"""Closed-form reference solutions for the exactly solvable zoo members.

Every precision matrix here is derived in code from the quadratic form of the
relevant log density (completion of the square), then cross-checked against
the closed-form rank-one identities where those apply. For a Gaussian target
the factorized-family optimum has the exact posterior means and variance equal
to the reciprocal of the corresponding precision diagonal; that is what
FviOptimum records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import (
    DenseGaussian,
    DiagGaussian,
    SymTridiag,
    sherman_morrison_inverse,
    spd_solve,
    tridiag_solve,
)
from .models import Dataset, LinearModel, SawModel, window_inputs_all
from .families import FactorizedState

__all__ = [
    "FviOptimum",
    "ProbeResult",
    "linear_fvi_optimum",
    "linear_exact_posterior",
    "cavi_residual",
    "hmm_precision",
    "hmm_exact_posterior",
    "hmm_fvi_optimum",
    "hmm_unbalanced_mean_series",
    "saw_fvi_optimum",
    "saw_cavi_factor",
    "well_posedness_probe",
    "dump_oracle_csv",
]


@dataclass
class FviOptimum:
    """Optimal factorized state in array form: per-site means and variances
    plus the optimal q(theta) (None when the model has no theta)."""

    q_theta: DiagGaussian | None
    site_means: np.ndarray
    site_vars: np.ndarray

    def as_state(self) -> FactorizedState:
        """Materialize as a FactorizedState (log_std = 0.5 log var)."""
        if self.q_theta is None:
            q_theta = DiagGaussian(np.zeros(0), np.zeros(0))
        else:
            q_theta = self.q_theta
        return FactorizedState(
            q_theta,
            self.site_means[:, None].copy(),
            0.5 * np.log(self.site_vars)[:, None],
        )


@dataclass
class ProbeResult:
    """Outcome of the ideal-inference-function well-posedness probe."""

    verdict: str                      # "well_posed" or "ill_posed"
    witness: tuple | None = None      # colliding site pair when ill_posed
    detail: str = ""


def linear_fvi_optimum(data: Dataset, tau: float, sigma: float) -> FviOptimum:
    """Optimal factorized state for the linear model, in closed form.

    Site means are tau / (sigma^2 + tau^2) * (x_n - x_bar) with shared
    variance sigma^2 / (sigma^2 + tau^2); q(theta) = N(x_bar, sigma^2 / N).
    """
    if tau == 0.0 or sigma == 0.0:
        raise ValueError("tau and sigma must be nonzero")
    x = data.x[:, 0]
    xbar = float(x.mean())
    denom = sigma**2 + tau**2
    means = tau / denom * (x - xbar)
    site_var = sigma**2 / denom
    q_theta = DiagGaussian(
        np.array([xbar]), np.array([0.5 * np.log(sigma**2 / data.n)])
    )
    return FviOptimum(q_theta, means, np.full(data.n, site_var))


def linear_exact_posterior(data: Dataset, tau: float, sigma: float) -> DenseGaussian:
    """Exact joint posterior over (theta, z_1..z_N) for the linear model.

    Index 0 is theta. The precision comes from the Hessian of -log p:
    Phi_00 = N / sigma^2, Phi_0n = tau / sigma^2, Phi_nn = 1 + tau^2 / sigma^2,
    all other entries 0. Construction is cross-validated against the
    rank-one form of the z-marginal precision (Schur complement equals
    beta I + alpha 11^T with beta = 1 + tau^2 / sigma^2,
    alpha = -tau^2 / (N sigma^2)) and against the posterior mean identity
    E[theta | x] = x_bar.
    """
    if tau == 0.0 or sigma == 0.0:
        raise ValueError("tau and sigma must be nonzero")
    n = data.n
    x = data.x[:, 0]
    s2 = sigma**2
    phi = np.zeros((n + 1, n + 1))
    phi[0, 0] = n / s2
    phi[0, 1:] = phi[1:, 0] = tau / s2
    idx = np.arange(1, n + 1)
    phi[idx, idx] = 1.0 + tau**2 / s2
    b = np.concatenate([[x.sum() / s2], tau * x / s2])
    mean = spd_solve(phi, b)

    # cross-checks: Schur complement vs rank-one closed form; theta mean
    beta = 1.0 + tau**2 / s2
    alpha = -(tau**2) / (n * s2)
    schur = phi[1:, 1:] - np.outer(phi[1:, 0], phi[0, 1:]) / phi[0, 0]
    rank_one = beta * np.eye(n) + alpha * np.ones((n, n))
    if np.max(np.abs(schur - rank_one)) > 1e-10 * max(beta, 1.0):
        raise AssertionError("z-marginal precision disagrees with the rank-one form")
    sherman_morrison_inverse(beta, alpha, n)  # must be invertible
    if abs(mean[0] - x.mean()) > 1e-12 * max(1.0, abs(x.mean())):
        raise AssertionError("posterior theta mean does not equal x_bar")
    return DenseGaussian(mean, phi)


def cavi_residual(model: LinearModel, state: FactorizedState, data: Dataset) -> float:
    """Max parameter distance between each factor of `state` and its
    closed-form coordinate-ascent update given the other factors.

    Distances are taken on means and standard deviations; the residual
    vanishes at the factorized optimum (up to rounding).
    """
    tau, s2 = model.tau, model.sigma**2
    x = data.x[:, 0]
    denom = s2 + tau**2

    m_theta = float(state.q_theta.mean[0])
    sd_theta = float(np.exp(state.q_theta.log_std[0]))
    z_means = state.z_means[:, 0]
    z_sds = np.exp(state.z_log_stds[:, 0])

    # q(theta) update given the site factors
    new_m_theta = float(x.mean() - tau * z_means.mean())
    new_sd_theta = float(np.sqrt(s2 / data.n))
    worst = max(abs(new_m_theta - m_theta), abs(new_sd_theta - sd_theta))

    # site updates given q(theta); other sites do not enter
    new_means = tau * (x - m_theta) / denom
    new_sd = np.sqrt(s2 / denom)
    worst = max(worst, float(np.max(np.abs(new_means - z_means))))
    worst = max(worst, float(np.max(np.abs(new_sd - z_sds))))
    return worst


def hmm_precision(n: int) -> SymTridiag:
    """Posterior precision of the random-walk smoother, derived by expanding
    -log p(z | x) = 0.5 [sum_{n>=1} (z_n - z_{n-1})^2 + sum_n (x_n - z_n)^2].

    diag = [2, 3, ..., 3, 2] (emission + incident transitions; the flat start
    contributes nothing), off-diagonal = -1.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    diag = np.full(n, 3.0)
    diag[0] -= 1.0
    diag[-1] -= 1.0
    return SymTridiag(diag, np.full(max(n - 1, 0), -1.0))


def hmm_exact_posterior(data: Dataset) -> DenseGaussian:
    """Exact Gaussian posterior over z for the fixed-theta random walk model.

    The linear term of the quadratic form is simply x (only emissions carry
    first-order terms), so the mean solves Psi mu = x on the tridiagonal
    precision from hmm_precision.
    """
    tri = hmm_precision(data.n)
    mean = tridiag_solve(tri, data.x[:, 0])
    return DenseGaussian(mean, tri.to_dense())


def hmm_fvi_optimum(data: Dataset) -> FviOptimum:
    """Factorized optimum for the random walk: exact means, variances equal to
    the reciprocal precision diagonal (boundary sites 1/2, interior 1/3)."""
    tri = hmm_precision(data.n)
    post = hmm_exact_posterior(data)
    return FviOptimum(None, post.mean, 1.0 / tri.diag)


def hmm_unbalanced_mean_series(data: Dataset) -> np.ndarray:
    """Comparison series from the unbalanced coefficient convention.

    Solves the linear system with an unadjusted diagonal of 3 at every site,
    off-diagonals of -2, a unit pre-series row, and linear term -2x. The
    matrix is indefinite for long series, so this is not a valid Gaussian
    precision and must not back a posterior; the solution is kept only
    because it produces the oscillatory mean series used as the published
    figure's comparison data. See hmm_exact_posterior for the derived oracle.
    """
    n = data.n
    m = np.zeros((n + 1, n + 1))
    m[0, 0] = 1.0
    m[0, 1] = m[1, 0] = -2.0
    for i in range(1, n + 1):
        m[i, i] = 3.0
        m[i, i - 1] = m[i - 1, i] = -2.0
    rhs = np.concatenate([[0.0], -2.0 * data.x[:, 0]])
    return np.linalg.solve(m, rhs)[1:]


def saw_fvi_optimum(model: SawModel, data: Dataset) -> FviOptimum:
    """Factorized optimum for the saw model (jointly Gaussian target).

    Precision over (theta, z): Phi_theta = 1 + N alpha^2, Phi_theta,z_n =
    alpha^2, Phi_z_n = 1 + alpha^2; linear term b_theta = alpha sum x_n,
    b_z_n = x_{n-1} + alpha x_n with x_{-1} = x0.
    """
    a = model.alpha
    n = data.n
    x = data.x[:, 0]
    x_prev = np.concatenate([[model.x0], x[:-1]])
    phi = np.zeros((n + 1, n + 1))
    phi[0, 0] = 1.0 + n * a * a
    phi[0, 1:] = phi[1:, 0] = a * a
    idx = np.arange(1, n + 1)
    phi[idx, idx] = 1.0 + a * a
    b = np.concatenate([[a * x.sum()], x_prev + a * x])
    mean = spd_solve(phi, b)
    q_theta = DiagGaussian(mean[:1], np.array([-0.5 * np.log(phi[0, 0])]))
    return FviOptimum(q_theta, mean[1:], np.full(n, 1.0 / (1.0 + a * a)))


def saw_cavi_factor(model: SawModel, data: Dataset, q_theta: DiagGaussian,
                    n: int) -> DiagGaussian:
    """Coordinate-ascent update for saw site n given q(theta).

    Collapses the prior N(x_{n-1}, 1) with the expected emission term into
    mean (x_{n-1} + alpha x_n - alpha^2 m_theta) / (1 + alpha^2) and variance
    1 / (1 + alpha^2); depends on the data only through (x_{n-1}, x_n).
    """
    if not 0 <= n < data.n:
        raise ValueError(f"site {n} out of range for N={data.n}")
    a = model.alpha
    x_n = data.x[n, 0]
    x_prev = model.x0 if n == 0 else data.x[n - 1, 0]
    m_theta = float(q_theta.mean[0])
    prec = 1.0 + a * a
    mean = (x_prev + a * x_n - a * a * m_theta) / prec
    return DiagGaussian(np.array([mean]), np.array([-0.5 * np.log(prec)]))


def well_posedness_probe(opt: FviOptimum, model, data: Dataset,
                         input_tol: float = 1e-6,
                         target_tol: float = 1e-4) -> ProbeResult:
    """Decide whether an ideal inference function can exist at this window.

    Scans non-edge site pairs for a collision: windows equal within input_tol
    while the optimal (mean, var) targets differ by more than target_tol. Any
    collision is a witness that no function of the window can reproduce the
    factorized optimum.
    """
    sites, u = window_inputs_all(model, data)
    means = opt.site_means[sites]
    variances = opt.site_vars[sites]
    m = sites.size
    # pairwise max-abs window difference, fine at desk scale
    input_close = (
        np.max(np.abs(u[:, None, :] - u[None, :, :]), axis=2) <= input_tol
    )
    target_far = (
        np.abs(means[:, None] - means[None, :]) > target_tol
    ) | (
        np.abs(variances[:, None] - variances[None, :]) > target_tol
    )
    bad = np.triu(input_close & target_far, k=1)
    hits = np.argwhere(bad)
    if hits.size:
        i, j = int(hits[0][0]), int(hits[0][1])
        pair = (int(sites[i]), int(sites[j]))
        return ProbeResult(
            "ill_posed", pair,
            f"sites {pair[0]} and {pair[1]} share a window but need different factors",
        )
    return ProbeResult("well_posed", None, f"no collision among {m} sites")


def dump_oracle_csv(path, opt: FviOptimum) -> None:
    """Write an optimum as CSV rows (site, mean, var)."""
    lines = ["site,mean,var"]
    for i, (mu, v) in enumerate(zip(opt.site_means, opt.site_vars)):
        lines.append(f"{i},{float(mu)!r},{float(v)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
