"""Model zoo: local-latent models with exact log joints, gradients, simulators.

Every model has one global parameter block theta (possibly empty) and one local
latent z_n per observed site x_n. The joint factors as

    p(theta) * prod_n p(z_n | parents) * p(x_n | z_n, theta)

with at most a one-step dependence between consecutive sites, so each model can
report per-site log-density terms. Gradients with respect to theta and z are
hand-derived and exact for the written densities; the estimator layer relies on
that for pathwise gradients, and the finite-difference checks enforce it.

Sites are 0-indexed. The first ``window - 1`` sites are edge sites: their
inference-function input window would reach before the start of the series.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .gaussian import LOG_2PI

__all__ = [
    "Dataset",
    "JointTerms",
    "ModelSpec",
    "LinearModel",
    "NonlinearModel",
    "SawModel",
    "HmmModel",
    "HmmThetaModel",
    "DecoderModel",
    "StandardSiteModel",
    "MODEL_FACTORIES",
    "make_model",
    "window_inputs",
    "window_inputs_all",
    "save_dataset_csv",
    "load_dataset_csv",
]


@dataclass
class Dataset:
    """Observed series: one row of x per site.

    Parameters
    ----------
    x : (N, x_dim) array
    provenance : str
        "seed=... <hyperparams>" when simulated, "external" otherwise.
    """

    x: np.ndarray
    provenance: str = "external"

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("x must be a (N, x_dim) matrix with N >= 1")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.x.shape[0]


class JointTerms(NamedTuple):
    """Per-sample log-joint pieces and their exact gradients.

    theta_term : (S,) log p(theta) per sample
    site_terms : (S, B) log p(z_n | parents) + log p(x_n | z_n, theta) for the
        selected sites
    g_theta_prior : (S, theta_dim) gradient of theta_term w.r.t. theta
    g_theta_sites : (S, theta_dim) gradient of the summed selected site terms
    g_z : (S, N, z_dim) gradient of the summed selected site terms w.r.t. z;
        nonzero only where those terms touch z
    """

    theta_term: np.ndarray
    site_terms: np.ndarray
    g_theta_prior: np.ndarray
    g_theta_sites: np.ndarray
    g_z: np.ndarray


class ModelSpec:
    """Base class fixing the model interface.

    Subclasses set name, theta_dim, z_dim, x_dim, window, hyper and implement
    joint_terms and simulate.
    """

    name: str = ""
    theta_dim: int = 0
    z_dim: int = 1
    x_dim: int = 1
    window: int = 1
    hyper: dict = {}

    @property
    def edge_sites(self) -> frozenset:
        """Sites whose inference window would index before the series start."""
        return frozenset(range(self.window - 1))

    def joint_terms(self, theta, z, x, sites) -> JointTerms:
        raise NotImplementedError

    def simulate(self, n, seed):
        raise NotImplementedError

    def log_joint(self, theta: np.ndarray, z: np.ndarray, data: Dataset) -> float:
        """log p(theta, z, x) for a single configuration.

        theta has shape (theta_dim,), z has shape (N, z_dim). Raises on a
        non-finite result, naming the offending site.
        """
        theta = np.asarray(theta, dtype=float).reshape(1, self.theta_dim)
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape != (data.n, self.z_dim):
            raise ValueError(f"z has shape {z.shape}, expected ({data.n}, {self.z_dim})")
        with np.errstate(over="ignore", invalid="ignore"):
            terms = self.joint_terms(theta, z[None], data.x, np.arange(data.n))
        per_site = terms.site_terms[0]
        if not np.all(np.isfinite(per_site)):
            bad = int(np.flatnonzero(~np.isfinite(per_site))[0])
            raise FloatingPointError(f"non-finite log joint at site {bad}")
        total = float(terms.theta_term[0] + per_site.sum())
        if not np.isfinite(total):
            raise FloatingPointError("non-finite log joint in the theta term")
        return total

    def _provenance(self, seed) -> str:
        parts = [f"seed={seed}"] + [f"{k}={v}" for k, v in self.hyper.items()]
        return " ".join(parts)


def _std_normal_terms(v):
    # log N(v; 0, 1) summed over the last axis
    return np.sum(-0.5 * LOG_2PI - 0.5 * v * v, axis=-1)


class LinearModel(ModelSpec):
    """Global shift with flat prior: p(theta) flat, z_n ~ N(0,1),
    x_n ~ N(theta + tau * z_n, sigma^2).

    The flat prior contributes exactly 0 to the log joint.
    """

    name = "linear"
    theta_dim = 1
    z_dim = 1
    x_dim = 1

    def __init__(self, tau: float = 1.0, sigma: float = 1.0, window: int = 1):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.tau = float(tau)
        self.sigma = float(sigma)
        self.window = int(window)
        self.hyper = {"tau": self.tau, "sigma": self.sigma}

    def joint_terms(self, theta, z, x, sites):
        s_count = theta.shape[0]
        tau, sig2 = self.tau, self.sigma**2
        zb = z[:, sites, 0]                      # (S, B)
        xb = x[sites, 0]
        r = xb[None, :] - theta - tau * zb       # theta broadcasts (S,1)
        site_terms = (
            -0.5 * LOG_2PI - 0.5 * zb * zb
            - 0.5 * LOG_2PI - np.log(self.sigma) - 0.5 * r * r / sig2
        )
        g_z = np.zeros_like(z)
        g_z[:, sites, 0] = -zb + tau * r / sig2
        g_theta_sites = np.sum(r / sig2, axis=1, keepdims=True)
        zero = np.zeros((s_count, 1))
        return JointTerms(np.zeros(s_count), site_terms, zero, g_theta_sites, g_z)

    def simulate(self, n, seed):
        rng = np.random.default_rng(seed)
        theta = rng.standard_normal(1)
        z = rng.standard_normal((n, 1))
        x = theta[0] + self.tau * z + self.sigma * rng.standard_normal((n, 1))
        return Dataset(x, self._provenance(seed)), theta, z


class NonlinearModel(ModelSpec):
    """theta ~ N(0,1), z_n ~ N(0,1), x_n ~ N(theta + z(1 + sin z), s(z)^2)
    with s(z) = max(|cos z|, std_floor).

    The floor keeps the observation noise bounded away from zero near the
    roots of cos; the same floored s is used for simulation and density so the
    model stays self-consistent.
    """

    name = "nonlinear"
    theta_dim = 1
    z_dim = 1
    x_dim = 1

    def __init__(self, std_floor: float = 1e-3, window: int = 1):
        self.std_floor = float(std_floor)
        self.window = int(window)
        self.hyper = {"std_floor": self.std_floor}

    def _noise_std(self, z):
        c = np.cos(z)
        s = np.maximum(np.abs(c), self.std_floor)
        # derivative of s w.r.t. z; zero on the floored region
        ds = np.where(np.abs(c) > self.std_floor, -np.sign(c) * np.sin(z), 0.0)
        return s, ds

    def joint_terms(self, theta, z, x, sites):
        zb = z[:, sites, 0]
        xb = x[sites, 0]
        s, ds = self._noise_std(zb)
        m = theta + zb * (1.0 + np.sin(zb))
        r = xb[None, :] - m
        site_terms = (
            -0.5 * LOG_2PI - 0.5 * zb * zb
            - 0.5 * LOG_2PI - np.log(s) - 0.5 * (r / s) ** 2
        )
        dm = 1.0 + np.sin(zb) + zb * np.cos(zb)
        g_z = np.zeros_like(z)
        g_z[:, sites, 0] = -zb + r * dm / s**2 + ds * (r * r / s**3 - 1.0 / s)
        g_theta_sites = np.sum(r / s**2, axis=1, keepdims=True)
        theta_term = _std_normal_terms(theta)
        return JointTerms(theta_term, site_terms, -theta, g_theta_sites, g_z)

    def simulate(self, n, seed):
        rng = np.random.default_rng(seed)
        theta = rng.standard_normal(1)
        z = rng.standard_normal((n, 1))
        s, _ = self._noise_std(z)
        x = theta[0] + z * (1.0 + np.sin(z)) + s * rng.standard_normal((n, 1))
        return Dataset(x, self._provenance(seed)), theta, z


class SawModel(ModelSpec):
    """Time series where the latent mean tracks the previous observation:
    theta ~ N(0,1), z_n ~ N(x_{n-1}, 1), x_n ~ N(alpha (theta + z_n), 1),
    with the fixed initial observation x_{-1} = x0.

    The natural inference window is 2: the optimal factor for site n depends on
    (x_{n-1}, x_n).
    """

    name = "saw"
    theta_dim = 1
    z_dim = 1
    x_dim = 1

    def __init__(self, alpha: float = 0.5, x0: float = 0.0, window: int = 2):
        self.alpha = float(alpha)
        self.x0 = float(x0)
        self.window = int(window)
        self.hyper = {"alpha": self.alpha, "x0": self.x0}

    def _x_prev(self, x, sites):
        xp = np.empty(len(sites))
        inner = sites > 0
        xp[inner] = x[sites[inner] - 1, 0]
        xp[~inner] = self.x0
        return xp

    def joint_terms(self, theta, z, x, sites):
        a = self.alpha
        zb = z[:, sites, 0]
        xb = x[sites, 0]
        xp = self._x_prev(x, sites)
        dz = zb - xp[None, :]
        r = xb[None, :] - a * (theta + zb)
        site_terms = -0.5 * LOG_2PI - 0.5 * dz * dz - 0.5 * LOG_2PI - 0.5 * r * r
        g_z = np.zeros_like(z)
        g_z[:, sites, 0] = -dz + a * r
        g_theta_sites = np.sum(a * r, axis=1, keepdims=True)
        return JointTerms(_std_normal_terms(theta), site_terms, -theta, g_theta_sites, g_z)

    def simulate(self, n, seed):
        rng = np.random.default_rng(seed)
        theta = float(rng.standard_normal())
        z = np.empty((n, 1))
        x = np.empty((n, 1))
        prev = self.x0
        for i in range(n):
            z[i, 0] = prev + rng.standard_normal()
            x[i, 0] = self.alpha * (theta + z[i, 0]) + rng.standard_normal()
            prev = x[i, 0]
        return Dataset(x, self._provenance(seed)), np.array([theta]), z


class HmmModel(ModelSpec):
    """Gaussian random walk observed with unit noise, emission mean z_n.

    The walk starts flat: marginalizing the flat-prior pre-series state through
    the unit transition leaves a flat prior on z_0, which contributes 0 to the
    log joint. Transitions z_n ~ N(z_{n-1}, 1) apply from site 1 on, emissions
    x_n ~ N(z_n, 1) at every site. theta is fixed (empty).
    """

    name = "hmm"
    theta_dim = 0
    z_dim = 1
    x_dim = 1

    def __init__(self, window: int = 1):
        self.window = int(window)
        self.hyper = {}

    def _emission_resid(self, theta, zb, xb):
        return xb[None, :] - zb

    def joint_terms(self, theta, z, x, sites):
        s_count = z.shape[0]
        zb = z[:, sites, 0]
        xb = x[sites, 0]
        r = self._emission_resid(theta, zb, xb)
        site_terms = -0.5 * LOG_2PI - 0.5 * r * r
        g_z = np.zeros_like(z)
        np.add.at(g_z[:, :, 0], (slice(None), sites), r)
        g_theta_sites = np.zeros((s_count, self.theta_dim))
        if self.theta_dim:
            g_theta_sites = np.sum(r, axis=1, keepdims=True)
        # transition terms belong to the later site of each pair
        trans = sites[sites > 0]
        if trans.size:
            d = z[:, trans, 0] - z[:, trans - 1, 0]
            cols = np.searchsorted(sites, trans)
            site_terms[:, cols] += -0.5 * LOG_2PI - 0.5 * d * d
            np.add.at(g_z[:, :, 0], (slice(None), trans), -d)
            np.add.at(g_z[:, :, 0], (slice(None), trans - 1), d)
        theta_term = _std_normal_terms(theta) if self.theta_dim else np.zeros(s_count)
        return JointTerms(theta_term, site_terms, -theta, g_theta_sites, g_z)

    def simulate(self, n, seed):
        # The flat start cannot be sampled; data generation draws z_0 ~ N(0,1)
        # and says so in the provenance. Inference keeps the flat start.
        rng = np.random.default_rng(seed)
        theta = rng.standard_normal(self.theta_dim)
        z = np.cumsum(rng.standard_normal((n, 1)), axis=0)
        mean = z + (theta[0] if self.theta_dim else 0.0)
        x = mean + rng.standard_normal((n, 1))
        return Dataset(x, self._provenance(seed) + " z0=std-normal"), theta, z


class HmmThetaModel(HmmModel):
    """HMM variant with a learned emission shift: x_n ~ N(z_n + theta, 1),
    theta ~ N(0,1)."""

    name = "hmm-theta"
    theta_dim = 1

    def _emission_resid(self, theta, zb, xb):
        return xb[None, :] - zb - theta


class DecoderModel(ModelSpec):
    """Tiny decoder model: x_n ~ N(net(z_n; theta), I) with a one-hidden-layer
    leaky-ReLU decoder whose weights are the global parameters.

    theta packs [W1 (hidden x z_dim), b1, W2 (x_dim x hidden), b2] raveled in
    that order, every entry with a standard normal prior.
    """

    name = "decoder"
    z_dim = 2
    x_dim = 4

    def __init__(self, hidden: int = 8, slope: float = 0.01, window: int = 1):
        self.hidden = int(hidden)
        self.slope = float(slope)
        self.window = int(window)
        self.theta_dim = self.hidden * self.z_dim + self.hidden + self.x_dim * self.hidden + self.x_dim
        self.hyper = {"hidden": self.hidden, "slope": self.slope}

    def _unpack(self, theta):
        h, dz, dx = self.hidden, self.z_dim, self.x_dim
        i = 0
        w1 = theta[:, i:i + h * dz].reshape(-1, h, dz); i += h * dz
        b1 = theta[:, i:i + h]; i += h
        w2 = theta[:, i:i + dx * h].reshape(-1, dx, h); i += dx * h
        b2 = theta[:, i:i + dx]
        return w1, b1, w2, b2

    def decode(self, theta, z):
        """Decoder output for theta (S, theta_dim) and z (S, M, z_dim)."""
        w1, b1, w2, b2 = self._unpack(theta)
        pre = np.einsum("sij,snj->sni", w1, z) + b1[:, None, :]
        h = np.where(pre >= 0.0, pre, self.slope * pre)
        return np.einsum("ski,sni->snk", w2, h) + b2[:, None, :], (pre, h, w1, w2)

    def joint_terms(self, theta, z, x, sites):
        zb = z[:, sites, :]                       # (S, B, dz)
        out, (pre, h, w1, w2) = self.decode(theta, zb)
        r = x[sites][None, :, :] - out            # (S, B, dx)
        site_terms = np.sum(-0.5 * LOG_2PI - 0.5 * r * r, axis=2)
        site_terms += _std_normal_terms(zb)
        # backprop r through the decoder, batched over samples
        dw2 = np.einsum("snk,sni->ski", r, h)
        db2 = np.sum(r, axis=1)
        dh = np.einsum("snk,ski->sni", r, w2)
        dpre = dh * np.where(pre >= 0.0, 1.0, self.slope)
        dw1 = np.einsum("sni,snj->sij", dpre, zb)
        db1 = np.sum(dpre, axis=1)
        dzb = np.einsum("sni,sij->snj", dpre, w1)
        g_z = np.zeros_like(z)
        g_z[:, sites, :] = dzb - zb
        s_count = theta.shape[0]
        g_theta_sites = np.concatenate(
            [dw1.reshape(s_count, -1), db1, dw2.reshape(s_count, -1), db2], axis=1
        )
        return JointTerms(_std_normal_terms(theta), site_terms, -theta, g_theta_sites, g_z)

    def simulate(self, n, seed):
        rng = np.random.default_rng(seed)
        theta = rng.standard_normal(self.theta_dim)
        z = rng.standard_normal((n, self.z_dim))
        out, _ = self.decode(theta[None], z[None])
        x = out[0] + rng.standard_normal((n, self.x_dim))
        return Dataset(x, self._provenance(seed)), theta, z


class StandardSiteModel(ModelSpec):
    """Prior-only toy: z_n ~ N(0,1) and no likelihood term. Useful as the
    exactly-solvable target for estimator and optimizer tests."""

    name = "standard-site"
    theta_dim = 0
    z_dim = 1
    x_dim = 1

    def __init__(self, window: int = 1):
        self.window = int(window)
        self.hyper = {}

    def joint_terms(self, theta, z, x, sites):
        s_count = z.shape[0]
        zb = z[:, sites, 0]
        site_terms = -0.5 * LOG_2PI - 0.5 * zb * zb
        g_z = np.zeros_like(z)
        g_z[:, sites, 0] = -zb
        return JointTerms(
            np.zeros(s_count), site_terms, np.zeros((s_count, 0)),
            np.zeros((s_count, 0)), g_z,
        )

    def simulate(self, n, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, 1))
        return Dataset(np.zeros((n, 1)), self._provenance(seed)), np.zeros(0), z


MODEL_FACTORIES = {
    "linear": LinearModel,
    "nonlinear": NonlinearModel,
    "saw": SawModel,
    "hmm": HmmModel,
    "hmm-theta": HmmThetaModel,
    "decoder": DecoderModel,
    "standard-site": StandardSiteModel,
}


def make_model(name: str, **kwargs) -> ModelSpec:
    """Build a zoo model by name; unknown names raise ValueError."""
    if name not in MODEL_FACTORIES:
        raise ValueError(f"unknown model {name!r}; choices: {sorted(MODEL_FACTORIES)}")
    return MODEL_FACTORIES[name](**kwargs)


def window_inputs(model: ModelSpec, data: Dataset, n: int) -> np.ndarray:
    """Observation window feeding the inference function for site n.

    Returns (x_{n-window+1}, ..., x_n) raveled to length window * x_dim.
    Edge sites (n < window - 1) have no full window and raise ValueError.
    """
    if not 0 <= n < data.n:
        raise ValueError(f"site {n} out of range for N={data.n}")
    w = model.window
    if n < w - 1:
        raise ValueError(f"site {n} is an edge site for window={w}")
    return data.x[n - w + 1 : n + 1].ravel()


def window_inputs_all(model: ModelSpec, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Windows for every non-edge site, stacked.

    Returns (sites, U) where U[k] = window_inputs(model, data, sites[k]).
    """
    w = model.window
    sites = np.arange(w - 1, data.n)
    if w == 1:
        return sites, data.x[sites]
    # row k is [x_{k-w+1}, ..., x_k] raveled time-major
    u = np.stack([data.x[s - w + 1 : s + 1].ravel() for s in sites])
    return sites, u


def save_dataset_csv(path, data: Dataset, meta: dict | None = None) -> None:
    """Write a dataset as CSV: '#' key=value header lines, then one row per site."""
    meta = dict(meta or {})
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("# provenance=" + data.provenance)
    lines.append(",".join(f"x_{j + 1}" for j in range(data.x.shape[1])))
    for row in data.x:
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path) -> tuple[Dataset, dict]:
    """Read a dataset CSV written by save_dataset_csv.

    Returns (dataset, meta) with meta holding the '#' header keys.
    """
    meta = {}
    rows = []
    header_seen = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if not header_seen:
                header_seen = True  # column names row
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ValueError(f"no data rows in {path}")
    provenance = meta.get("provenance", "external")
    return Dataset(np.asarray(rows), provenance), meta
