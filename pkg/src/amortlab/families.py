"""Variational families: factorized, constant-factor, and amortized states.

All three families share the same contract with the estimator layer:

  * ``param_vector()`` flattens every free parameter into one vector, and
    ``with_params(vec)`` rebuilds the state from such a vector (documented,
    stable ordering; exact round trip).
  * ``factor_arrays(model, data)`` materializes the per-site Gaussian factors
    as (theta_mean, theta_log_std, z_means, z_log_stds, ctx) arrays. The ctx
    object carries whatever the backward pass needs.
  * ``grads_to_vector(ctx, ...)`` maps gradients on the materialized factor
    parameters back to the flat parameter vector.

Because every family funnels through the same materialized-factor path, the
ELBO of an amortized state and of its embedding into the factorized family
agree bit for bit under a shared noise block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import DiagGaussian
from .models import Dataset, ModelSpec, window_inputs, window_inputs_all

__all__ = [
    "InferenceFn",
    "PolynomialFn",
    "MlpFn",
    "mlp_forward",
    "FactorizedState",
    "ConstantFactorState",
    "AmortizedState",
    "factor_for_site",
    "embed_to_factorized",
    "save_state_csv",
    "load_state_csv",
]


class InferenceFn:
    """Deterministic map from an observation window to factor parameters.

    Subclasses hold a flat ``params`` vector and implement ``forward_batch``
    plus the parameter VJP used by the pathwise gradient.
    """

    input_dim: int
    z_dim: int
    params: np.ndarray

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def forward_batch(self, u: np.ndarray):
        """Map windows u (M, input_dim) to (means (M, z_dim), log_stds (M, z_dim), cache)."""
        raise NotImplementedError

    def vjp_params(self, cache, d_mean: np.ndarray, d_log_std: np.ndarray) -> np.ndarray:
        """Accumulate d(outputs) into a gradient on ``params``."""
        raise NotImplementedError

    def with_params(self, params: np.ndarray) -> "InferenceFn":
        raise NotImplementedError

    def spec_string(self) -> str:
        raise NotImplementedError


class PolynomialFn(InferenceFn):
    """Scalar polynomial mean with one constant log_std.

    params = [a_0, ..., a_d, b] with mean(u) = sum_j a_j u^j and log_std = b,
    so a degree-d map has d + 2 parameters. Only scalar windows and scalar
    latents are supported; use MlpFn otherwise.
    """

    def __init__(self, degree: int, params: np.ndarray | None = None,
                 input_dim: int = 1, z_dim: int = 1):
        if input_dim != 1 or z_dim != 1:
            raise ValueError("PolynomialFn requires input_dim == 1 and z_dim == 1")
        if degree < 0:
            raise ValueError("degree must be >= 0")
        self.degree = int(degree)
        self.input_dim = 1
        self.z_dim = 1
        if params is None:
            params = np.zeros(self.degree + 2)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.degree + 2,):
            raise ValueError(f"expected {self.degree + 2} parameters, got {params.shape}")
        self.params = params

    def forward_batch(self, u):
        powers = u[:, 0:1] ** np.arange(self.degree + 1)[None, :]   # (M, d+1)
        # Horner keeps evaluation in plain ufunc arithmetic, so an affine map
        # set as (a0, a1) reproduces a0 + a1 u bit for bit
        x = u[:, 0]
        mean = np.full_like(x, self.params[self.degree])
        for j in range(self.degree - 1, -1, -1):
            mean = mean * x + self.params[j]
        log_std = np.full(u.shape[0], self.params[-1])
        return mean[:, None], log_std[:, None], powers

    def vjp_params(self, cache, d_mean, d_log_std):
        powers = cache
        grad = np.empty_like(self.params)
        grad[: self.degree + 1] = powers.T @ d_mean[:, 0]
        grad[-1] = float(np.sum(d_log_std))
        return grad

    def with_params(self, params):
        return PolynomialFn(self.degree, params)

    def spec_string(self):
        return f"poly-d{self.degree}"


def _activation(name):
    if name == "relu":
        return (lambda p: np.maximum(p, 0.0)), (lambda p: (p > 0.0).astype(float))
    if name == "leaky-relu":
        return (
            lambda p: np.where(p >= 0.0, p, 0.01 * p),
            lambda p: np.where(p >= 0.0, 1.0, 0.01),
        )
    raise ValueError(f"unknown activation {name!r}")


class MlpFn(InferenceFn):
    """Two-hidden-layer perceptron emitting (mean, log_std) per latent dim.

    Layers input_dim -> width -> width -> 2 * z_dim with an affine output; the
    log_std head is a full network output, not a lone bias. params packs
    [W1, b1, W2, b2, W3, b3] raveled in that order.
    """

    def __init__(self, input_dim: int, z_dim: int, width: int,
                 params: np.ndarray | None = None, activation: str = "relu",
                 seed: int = 0):
        self.input_dim = int(input_dim)
        self.z_dim = int(z_dim)
        self.width = int(width)
        self.activation = activation
        self._act, self._dact = _activation(activation)
        self.seed = int(seed)
        self._shapes = [
            (self.width, self.input_dim), (self.width,),
            (self.width, self.width), (self.width,),
            (2 * self.z_dim, self.width), (2 * self.z_dim,),
        ]
        total = sum(int(np.prod(s)) for s in self._shapes)
        if params is None:
            params = self._init_params(seed, total)
        params = np.asarray(params, dtype=float)
        if params.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {params.shape}")
        self.params = params

    def _init_params(self, seed, total):
        # centered uniform with half-width sqrt(6 / (fan_in + fan_out)); biases 0
        rng = np.random.default_rng(seed)
        chunks = []
        for shape in self._shapes:
            if len(shape) == 2:
                fan_out, fan_in = shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                chunks.append(rng.uniform(-a, a, size=fan_out * fan_in))
            else:
                chunks.append(np.zeros(shape[0]))
        return np.concatenate(chunks)

    def _unpack(self):
        out = []
        i = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(self.params[i : i + size].reshape(shape))
            i += size
        return out

    def forward_batch(self, u):
        w1, b1, w2, b2, w3, b3 = self._unpack()
        pre1 = u @ w1.T + b1
        h1 = self._act(pre1)
        pre2 = h1 @ w2.T + b2
        h2 = self._act(pre2)
        out = h2 @ w3.T + b3
        cache = (u, pre1, h1, pre2, h2)
        return out[:, : self.z_dim], out[:, self.z_dim :], cache

    def vjp_params(self, cache, d_mean, d_log_std):
        u, pre1, h1, pre2, h2 = cache
        w1, b1, w2, b2, w3, b3 = self._unpack()
        dout = np.concatenate([d_mean, d_log_std], axis=1)
        dw3 = dout.T @ h2
        db3 = dout.sum(axis=0)
        dh2 = dout @ w3
        dpre2 = dh2 * self._dact(pre2)
        dw2 = dpre2.T @ h1
        db2 = dpre2.sum(axis=0)
        dh1 = dpre2 @ w2
        dpre1 = dh1 * self._dact(pre1)
        dw1 = dpre1.T @ u
        db1 = dpre1.sum(axis=0)
        return np.concatenate([g.ravel() for g in (dw1, db1, dw2, db2, dw3, db3)])

    def with_params(self, params):
        return MlpFn(self.input_dim, self.z_dim, self.width, params, self.activation)

    def spec_string(self):
        return f"mlp-k{self.width}"


def mlp_forward(fn: InferenceFn, u: np.ndarray) -> np.ndarray:
    """Raw network outputs [means | log_stds].

    A single window vector gives a flat (2 * z_dim,) vector; a (M, input_dim)
    batch gives (M, 2 * z_dim).
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    if single and u.shape[0] != fn.input_dim:
        raise ValueError(f"input has length {u.shape[0]}, expected {fn.input_dim}")
    u2 = np.atleast_2d(u)
    mean, log_std, _ = fn.forward_batch(u2)
    out = np.concatenate([mean, log_std], axis=1)
    return out[0] if single else out


def _theta_gaussian(theta_dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros(theta_dim), np.zeros(theta_dim))


@dataclass
class FactorizedState:
    """Mean-field state: one free Gaussian factor per site plus q(theta)."""

    q_theta: DiagGaussian
    z_means: np.ndarray
    z_log_stds: np.ndarray

    def __post_init__(self):
        self.z_means = np.atleast_2d(np.asarray(self.z_means, dtype=float))
        self.z_log_stds = np.atleast_2d(np.asarray(self.z_log_stds, dtype=float))
        if self.z_means.shape != self.z_log_stds.shape:
            raise ValueError("z_means and z_log_stds must have matching shapes")

    @classmethod
    def init(cls, model: ModelSpec, data: Dataset) -> "FactorizedState":
        return cls(
            _theta_gaussian(model.theta_dim),
            np.zeros((data.n, model.z_dim)),
            np.zeros((data.n, model.z_dim)),
        )

    @property
    def n_sites(self) -> int:
        return self.z_means.shape[0]

    def algo_tag(self, model=None) -> str:
        return "fvi"

    def param_vector(self) -> np.ndarray:
        """[theta_mean, theta_log_std, z_means raveled, z_log_stds raveled]."""
        return np.concatenate([
            self.q_theta.mean, self.q_theta.log_std,
            self.z_means.ravel(), self.z_log_stds.ravel(),
        ])

    def with_params(self, vec: np.ndarray) -> "FactorizedState":
        vec = np.asarray(vec, dtype=float)
        dt = self.q_theta.dim
        shape = self.z_means.shape
        size = int(np.prod(shape))
        if vec.shape != (2 * dt + 2 * size,):
            raise ValueError(f"expected {2 * dt + 2 * size} parameters, got {vec.shape}")
        return FactorizedState(
            DiagGaussian(vec[:dt], vec[dt : 2 * dt]),
            vec[2 * dt : 2 * dt + size].reshape(shape),
            vec[2 * dt + size :].reshape(shape),
        )

    def factor_arrays(self, model: ModelSpec, data: Dataset):
        if self.n_sites != data.n:
            raise ValueError(f"state has {self.n_sites} sites, dataset has {data.n}")
        return (self.q_theta.mean, self.q_theta.log_std,
                self.z_means, self.z_log_stds, None)

    def grads_to_vector(self, ctx, d_tm, d_tl, d_zm, d_zl) -> np.ndarray:
        return np.concatenate([d_tm, d_tl, d_zm.ravel(), d_zl.ravel()])


@dataclass
class ConstantFactorState:
    """Shared-factor baseline: every site reuses one Gaussian factor."""

    q_theta: DiagGaussian
    shared: DiagGaussian

    @classmethod
    def init(cls, model: ModelSpec) -> "ConstantFactorState":
        return cls(_theta_gaussian(model.theta_dim),
                   DiagGaussian(np.zeros(model.z_dim), np.zeros(model.z_dim)))

    def algo_tag(self, model=None) -> str:
        return "constant"

    def param_vector(self) -> np.ndarray:
        """[theta_mean, theta_log_std, shared_mean, shared_log_std]."""
        return np.concatenate([
            self.q_theta.mean, self.q_theta.log_std,
            self.shared.mean, self.shared.log_std,
        ])

    def with_params(self, vec: np.ndarray) -> "ConstantFactorState":
        vec = np.asarray(vec, dtype=float)
        dt, dz = self.q_theta.dim, self.shared.dim
        if vec.shape != (2 * dt + 2 * dz,):
            raise ValueError(f"expected {2 * dt + 2 * dz} parameters, got {vec.shape}")
        return ConstantFactorState(
            DiagGaussian(vec[:dt], vec[dt : 2 * dt]),
            DiagGaussian(vec[2 * dt : 2 * dt + dz], vec[2 * dt + dz :]),
        )

    def factor_arrays(self, model: ModelSpec, data: Dataset):
        mu = np.broadcast_to(self.shared.mean, (data.n, self.shared.dim))
        ls = np.broadcast_to(self.shared.log_std, (data.n, self.shared.dim))
        return self.q_theta.mean, self.q_theta.log_std, mu, ls, None

    def grads_to_vector(self, ctx, d_tm, d_tl, d_zm, d_zl) -> np.ndarray:
        return np.concatenate([d_tm, d_tl, d_zm.sum(axis=0), d_zl.sum(axis=0)])


@dataclass
class AmortizedState:
    """Amortized state: factors come from an inference function of the site's
    observation window, except edge sites, which keep explicit factors."""

    q_theta: DiagGaussian
    fn: InferenceFn
    edge_factors: dict

    @classmethod
    def init(cls, model: ModelSpec, kind: str = "mlp", degree: int = 1,
             width: int = 4, activation: str = "relu", seed: int = 0) -> "AmortizedState":
        input_dim = model.window * model.x_dim
        if kind == "poly":
            fn = PolynomialFn(degree, input_dim=input_dim, z_dim=model.z_dim)
        elif kind == "mlp":
            fn = MlpFn(input_dim, model.z_dim, width, activation=activation, seed=seed)
        else:
            raise ValueError(f"unknown inference-fn kind {kind!r}")
        edge = {
            n: DiagGaussian(np.zeros(model.z_dim), np.zeros(model.z_dim))
            for n in sorted(model.edge_sites)
        }
        return cls(_theta_gaussian(model.theta_dim), fn, edge)

    def algo_tag(self, model: ModelSpec) -> str:
        return f"avi-{self.fn.spec_string()}-w{model.window}"

    @property
    def _edge_sites(self):
        return sorted(self.edge_factors)

    def param_vector(self) -> np.ndarray:
        """[theta_mean, theta_log_std, fn params, edge factors by site
        (mean then log_std)]."""
        chunks = [self.q_theta.mean, self.q_theta.log_std, self.fn.params]
        for n in self._edge_sites:
            g = self.edge_factors[n]
            chunks.extend([g.mean, g.log_std])
        return np.concatenate(chunks)

    def with_params(self, vec: np.ndarray) -> "AmortizedState":
        vec = np.asarray(vec, dtype=float)
        dt = self.q_theta.dim
        p = self.fn.n_params
        dz = self.fn.z_dim
        expect = 2 * dt + p + 2 * dz * len(self.edge_factors)
        if vec.shape != (expect,):
            raise ValueError(f"expected {expect} parameters, got {vec.shape}")
        q_theta = DiagGaussian(vec[:dt], vec[dt : 2 * dt])
        fn = self.fn.with_params(vec[2 * dt : 2 * dt + p])
        edge = {}
        i = 2 * dt + p
        for n in self._edge_sites:
            edge[n] = DiagGaussian(vec[i : i + dz], vec[i + dz : i + 2 * dz])
            i += 2 * dz
        return AmortizedState(q_theta, fn, edge)

    def factor_arrays(self, model: ModelSpec, data: Dataset):
        if set(self.edge_factors) != set(model.edge_sites):
            raise ValueError(
                f"edge factors {sorted(self.edge_factors)} do not match the "
                f"model's edge sites {sorted(model.edge_sites)}"
            )
        sites, u = window_inputs_all(model, data)
        f_mean, f_ls, cache = self.fn.forward_batch(u)
        dz = self.fn.z_dim
        mu = np.empty((data.n, dz))
        ls = np.empty((data.n, dz))
        mu[sites] = f_mean
        ls[sites] = f_ls
        for n, g in self.edge_factors.items():
            mu[n] = g.mean
            ls[n] = g.log_std
        return self.q_theta.mean, self.q_theta.log_std, mu, ls, (sites, cache)

    def grads_to_vector(self, ctx, d_tm, d_tl, d_zm, d_zl) -> np.ndarray:
        sites, cache = ctx
        d_fn = self.fn.vjp_params(cache, d_zm[sites], d_zl[sites])
        chunks = [d_tm, d_tl, d_fn]
        for n in self._edge_sites:
            chunks.extend([d_zm[n], d_zl[n]])
        return np.concatenate(chunks)


def factor_for_site(state, model: ModelSpec, data: Dataset, n: int) -> DiagGaussian:
    """The Gaussian factor the state assigns to site n.

    For amortized states this evaluates the inference function on the site's
    window (edge sites return their explicit factor); identical windows are
    therefore forced to identical factors.
    """
    if not 0 <= n < data.n:
        raise ValueError(f"site {n} out of range for N={data.n}")
    if isinstance(state, FactorizedState):
        if state.n_sites != data.n:
            raise ValueError("state and dataset disagree on the number of sites")
        return DiagGaussian(state.z_means[n].copy(), state.z_log_stds[n].copy())
    if isinstance(state, ConstantFactorState):
        return DiagGaussian(state.shared.mean.copy(), state.shared.log_std.copy())
    if isinstance(state, AmortizedState):
        if n in state.edge_factors:
            g = state.edge_factors[n]
            return DiagGaussian(g.mean.copy(), g.log_std.copy())
        u = window_inputs(model, data, n)
        mean, log_std, _ = state.fn.forward_batch(u[None, :])
        return DiagGaussian(mean[0], log_std[0])
    raise TypeError(f"not a variational state: {type(state).__name__}")


def embed_to_factorized(state, model: ModelSpec, data: Dataset) -> FactorizedState:
    """Materialize any state's factors into a FactorizedState with identical
    parameters (and therefore an identical ELBO under a shared noise block)."""
    tm, tl, mu, ls, _ = state.factor_arrays(model, data)
    return FactorizedState(
        DiagGaussian(np.array(tm, dtype=float, copy=True),
                     np.array(tl, dtype=float, copy=True)),
        np.array(mu, dtype=float, copy=True),
        np.array(ls, dtype=float, copy=True),
    )


def _state_header(state, model: ModelSpec) -> dict:
    meta = {"model": model.name, "theta_dim": model.theta_dim, "z_dim": model.z_dim,
            "window": model.window}
    if isinstance(state, FactorizedState):
        meta.update(kind="fvi", n=state.n_sites)
    elif isinstance(state, ConstantFactorState):
        meta.update(kind="constant")
    elif isinstance(state, AmortizedState):
        meta.update(kind="avi")
        fn = state.fn
        if isinstance(fn, PolynomialFn):
            meta.update(fn="poly", degree=fn.degree)
        else:
            meta.update(fn="mlp", width=fn.width, activation=fn.activation)
    else:
        raise TypeError(f"not a variational state: {type(state).__name__}")
    return meta


def save_state_csv(path, state, model: ModelSpec) -> None:
    """Checkpoint a state: '#' header naming kind/model/architecture, then the
    flat parameter vector one value per row."""
    meta = _state_header(state, model)
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("param")
    lines.extend(repr(float(v)) for v in state.param_vector())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_state_csv(path, model: ModelSpec, data: Dataset):
    """Rebuild a checkpointed state against the given model and dataset."""
    meta = {}
    params = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line == "param":
                continue
            if line.startswith("#"):
                k, v = line[1:].strip().split("=", 1)
                meta[k.strip()] = v.strip()
                continue
            params.append(float(line))
    params = np.asarray(params)
    if meta.get("model") != model.name:
        raise ValueError(f"checkpoint is for model {meta.get('model')!r}, not {model.name!r}")
    if int(meta.get("window", model.window)) != model.window:
        raise ValueError("checkpoint window disagrees with the model's window")
    kind = meta.get("kind")
    if kind == "fvi":
        if int(meta["n"]) != data.n:
            raise ValueError("checkpoint site count disagrees with the dataset")
        template = FactorizedState.init(model, data)
    elif kind == "constant":
        template = ConstantFactorState.init(model)
    elif kind == "avi":
        if meta["fn"] == "poly":
            template = AmortizedState.init(model, kind="poly", degree=int(meta["degree"]))
        else:
            template = AmortizedState.init(
                model, kind="mlp", width=int(meta["width"]),
                activation=meta.get("activation", "relu"),
            )
    else:
        raise ValueError(f"unknown state kind {kind!r} in checkpoint")
    return template.with_params(params)
