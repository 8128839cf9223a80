"""Stochastic gradient ascent on the ELBO estimator: Adam, fit loop, refine.

fit() is deterministic given its config: per-step noise blocks are seeded by
(run seed, step index), minibatches by a separate derived stream, so rerunning
a config reproduces the stepwise ELBO trace exactly on one machine.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .elbo import NoiseBlock, NumericalAbortError, elbo_estimate
from .families import embed_to_factorized
from .models import Dataset, ModelSpec

__all__ = [
    "OptimizerConfig",
    "RunRecord",
    "adam_step",
    "fit",
    "refine_with_fvi",
    "save_run_csv",
    "load_run_csv",
]

# stream offset separating minibatch draws from noise-block draws
_MINIBATCH_STREAM = 10_000_019


@dataclass
class OptimizerConfig:
    """Adam-ascent configuration.

    convergence_window None disables the early-stopping rule; otherwise the
    run stops once the median ELBO of the last `convergence_window` steps
    improves on the previous window's median by less than
    convergence_rel_tol * |previous median|.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 1000
    s: int = 100
    seed: int = 0
    convergence_window: int | None = 200
    convergence_rel_tol: float = 1e-3
    minibatch_size: int | None = None


@dataclass
class RunRecord:
    """One optimization run: per-step trace plus the final state.

    steps holds (step index, cumulative wall ms, elbo estimate) triples; wall
    time is measured with a monotonic clock around the numerical work, so the
    entries never decrease.
    """

    model_tag: str
    algo: str
    seed: int
    steps: list = field(default_factory=list)
    final_state: object = None
    converged_at: int | None = None
    verdict: str | None = None
    error: str | None = None
    cfg: OptimizerConfig | None = None

    def elbo_trace(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps], dtype=float)

    def final_elbo(self) -> float:
        if not self.steps:
            raise ValueError("run has no steps")
        return float(self.steps[-1][2])


def adam_step(params: np.ndarray, grad: np.ndarray, moments, t: int,
              cfg: OptimizerConfig):
    """One Adam ascent step (t counts from 1). Returns (params, moments).

    params <- params + lr * m_hat / (sqrt(v_hat) + eps), the ascent form of
    the standard bias-corrected update.
    """
    if t < 1:
        raise ValueError("step index t counts from 1")
    m, v = moments
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    return params + cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), (m, v)


def _converged(elbos, cfg) -> bool:
    w = cfg.convergence_window
    if w is None or len(elbos) < 2 * w:
        return False
    med_new = float(np.median(elbos[-w:]))
    med_prev = float(np.median(elbos[-2 * w : -w]))
    return (med_new - med_prev) < cfg.convergence_rel_tol * abs(med_prev)


def fit(model: ModelSpec, state, data: Dataset, cfg: OptimizerConfig) -> RunRecord:
    """Run Adam ascent from `state` and return the full RunRecord.

    A non-finite ELBO or gradient aborts with NumericalAbortError carrying the
    step index and the partial record (exc.partial_record).
    """
    record = RunRecord(model.name, state.algo_tag(model), cfg.seed, cfg=cfg)
    params = state.param_vector()
    moments = (np.zeros_like(params), np.zeros_like(params))
    current = state
    elbos = []
    wall_ms = 0.0
    mb_rng = np.random.default_rng([cfg.seed, _MINIBATCH_STREAM])

    for t in range(1, cfg.max_steps + 1):
        t0 = time.perf_counter()
        noise = NoiseBlock.from_seed([cfg.seed, t], cfg.s, model, data.n)
        minibatch = None
        if cfg.minibatch_size is not None:
            minibatch = np.sort(
                mb_rng.choice(data.n, size=min(cfg.minibatch_size, data.n), replace=False)
            )
        try:
            est = elbo_estimate(model, current, data, noise, minibatch)
        except NumericalAbortError as exc:
            exc.step = t
            record.error = f"step {t}: {exc}"
            exc.partial_record = record
            raise
        if not np.all(np.isfinite(est.grad)):
            record.error = f"step {t}: non-finite gradient"
            exc = NumericalAbortError(record.error, step=t)
            exc.partial_record = record
            raise exc
        params, moments = adam_step(params, est.grad, moments, t, cfg)
        current = current.with_params(params)
        wall_ms += (time.perf_counter() - t0) * 1000.0
        record.steps.append((t, wall_ms, est.value))
        elbos.append(est.value)
        if _converged(elbos, cfg):
            record.converged_at = t
            break

    record.final_state = current
    return record


def refine_with_fvi(model: ModelSpec, data: Dataset, record: RunRecord,
                    extra_steps: int, cfg: OptimizerConfig | None = None) -> RunRecord:
    """Embed a run's final state into the factorized family and keep fitting.

    This is the gap diagnostic: if freeing every per-site factor still
    improves the ELBO materially, the original family was leaving something on
    the table ("open"); otherwise the gap is closed within detection power.
    With extra_steps == 0 the verdict is skipped and `record` is returned
    unchanged.
    """
    if extra_steps == 0:
        return record
    if cfg is None:
        if record.cfg is None:
            raise ValueError("refinement needs an OptimizerConfig")
        cfg = replace(record.cfg, max_steps=extra_steps, seed=record.seed + 1)
    fvi_state = embed_to_factorized(record.final_state, model, data)
    continuation = fit(model, fvi_state, data, cfg)
    continuation.algo = record.algo + "+fvi-refine"

    w = cfg.convergence_window or 200
    base_tail = record.elbo_trace()[-w:]
    new_tail = continuation.elbo_trace()[-w:]
    base_med = float(np.median(base_tail))
    new_med = float(np.median(new_tail))
    if new_med - base_med > cfg.convergence_rel_tol * abs(base_med):
        continuation.verdict = "open"
    else:
        continuation.verdict = "closed"
    return continuation


def save_run_csv(path, record: RunRecord) -> None:
    """Write the per-step trace with the run key on every row."""
    lines = ["model,algo,seed,step,wall_time_ms,elbo,error"]
    for step, wall, elbo in record.steps:
        lines.append(f"{record.model_tag},{record.algo},{record.seed},"
                     f"{step},{wall:.3f},{elbo!r},")
    if record.error is not None:
        # abort messages contain commas, so the field needs quoting
        err = record.error.replace('"', '""')
        lines.append(f'{record.model_tag},{record.algo},{record.seed},,,,"{err}"')
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_run_csv(path) -> dict:
    """Read a run CSV back into plain arrays (no states)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        rows = [r for r in reader if r]
    out = {
        "model": rows[0][0] if rows else "",
        "algo": rows[0][1] if rows else "",
        "seed": int(rows[0][2]) if rows else -1,
        "error": None,
    }
    steps = []
    for r in rows:
        if r[3] == "":
            out["error"] = r[6]
            continue
        steps.append((int(r[3]), float(r[4]), float(r[5])))
    out["steps"] = steps
    return out
