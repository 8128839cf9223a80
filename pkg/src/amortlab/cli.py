"""Experiment harness and command-line interface.

Subcommands
-----------
simulate      draw datasets from a zoo model and write them as CSV
fit           fit one family to a dataset across seeds, writing run + state files
gap-report    evaluate finished runs under one shared noise block and emit
              per-capacity gap verdicts
diagnose      continue a fitted amortized state inside the factorized family
              and report whether the gap was open
figure-data   emit tidy CSVs behind the standard plots

Every command honors --out, defaulting to the AMORTLAB_OUT environment
variable and then ./amortlab-out. A flat key=value config file can supply any
flag via --config; explicit flags win. Exit codes: 0 success, 1 usage error,
2 numerical abort during fitting.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elbo import NoiseBlock, NumericalAbortError, elbo_estimate
from .families import (
    AmortizedState,
    ConstantFactorState,
    FactorizedState,
    load_state_csv,
    save_state_csv,
)
from .models import (
    Dataset,
    MODEL_FACTORIES,
    load_dataset_csv,
    make_model,
    save_dataset_csv,
)
from .optim import (
    OptimizerConfig,
    RunRecord,
    fit,
    load_run_csv,
    refine_with_fvi,
    save_run_csv,
)
from .oracles import (
    dump_oracle_csv,
    hmm_fvi_optimum,
    hmm_unbalanced_mean_series,
    linear_fvi_optimum,
    saw_fvi_optimum,
)

__all__ = ["ExperimentConfig", "GapReport", "build_gap_report", "main",
           "parse_config", "emit_config", "mc_tolerance"]

OUT_ENV_VAR = "AMORTLAB_OUT"
# shared evaluation block: same draws for every final state being compared
EVAL_SEED = 909_090
GAP_TOL_FLOOR = 0.5


class UsageError(Exception):
    """Bad flags, unknown names, missing files: exit code 1."""


@dataclass
class ExperimentConfig:
    """Everything one fit invocation needs, flag-for-flag."""

    model: str = "linear"
    n: int = 100
    algo: str = "fvi"
    kind: str = "mlp"
    degree: int = 1
    width: int = 4
    window: int | None = None
    seeds: list = field(default_factory=lambda: [0])
    steps: int = 1000
    samples: int = 100
    lr: float = 1e-3
    minibatch: int | None = None
    data_seed: int = 0

    def validate(self):
        if self.model not in MODEL_FACTORIES:
            raise UsageError(f"unknown model {self.model!r}")
        if self.algo not in ("fvi", "constant", "avi"):
            raise UsageError(f"unknown algo {self.algo!r}")
        if not self.seeds:
            raise UsageError("seeds must be nonempty")
        if self.n < 1:
            raise UsageError("n must be >= 1")
        if self.window is not None and self.window > self.n:
            raise UsageError("window must be <= n")


def build_model(name: str, window: int | None, meta: dict | None = None):
    """Construct a zoo model, optionally overriding the window and pulling
    hyperparameters back out of a dataset or checkpoint header."""
    kwargs = {}
    meta = meta or {}
    casts = {"tau": float, "sigma": float, "alpha": float, "x0": float,
             "std_floor": float, "hidden": int, "slope": float}
    probe = make_model(name)
    for key, cast in casts.items():
        if key in meta and key in probe.hyper:
            kwargs[key] = cast(meta[key])
    if window is not None:
        kwargs["window"] = int(window)
    return make_model(name, **kwargs)


def init_state(model, data, cfg: ExperimentConfig, seed: int):
    if cfg.algo == "fvi":
        return FactorizedState.init(model, data)
    if cfg.algo == "constant":
        return ConstantFactorState.init(model)
    return AmortizedState.init(model, kind=cfg.kind, degree=cfg.degree,
                               width=cfg.width, seed=seed)


def split_algo_tag(tag: str) -> tuple:
    """'avi-mlp-k20-leaky-relu-w2' -> ('avi', full tag as capacity)."""
    head = tag.split("-", 1)[0].split("+", 1)[0]
    return head, tag


# ---------------------------------------------------------------------------
# config files: flat key = value, flags override


def parse_config(path) -> dict:
    """Read a flat key=value config file; '#' lines are comments."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"bad config line {line!r} in {path}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def emit_config(cfg: dict, path) -> None:
    """Write a config dict in the same flat format, keys sorted."""
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gap report


@dataclass
class GapReport:
    """Per-run final ELBOs plus per-capacity medians and verdicts."""

    model: str
    rows: list = field(default_factory=list)
    medians: dict = field(default_factory=dict)
    tols: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    oracle_elbo: float = float("nan")

    def to_csv(self, path) -> None:
        cols = ("model,algo,capacity,seed,final_elbo,steps_to_convergence,"
                "wall_ms_to_convergence,median_final_elbo,fvi_median,"
                "oracle_elbo,mc_tol,verdict,ordering_ok")
        lines = [cols]
        fvi_med = self.medians.get("fvi", float("nan"))
        for row in self.rows:
            tag = row["algo"]
            algo, capacity = split_algo_tag(tag)
            lines.append(",".join([
                self.model, algo, capacity, str(row["seed"]),
                repr(row["final_elbo"]), str(row["steps_to_convergence"]),
                f"{row['wall_ms_to_convergence']:.3f}",
                repr(self.medians[tag]), repr(fvi_med), repr(self.oracle_elbo),
                repr(self.tols.get(tag, float("nan"))),
                self.verdicts.get(tag, ""),
                str(row["ordering_ok"]),
            ]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def mc_tolerance(a_finals, f_finals) -> float:
    """3x the pooled standard error of the per-seed final ELBOs, floored at
    GAP_TOL_FLOOR so single-seed comparisons stay honest."""
    a_finals = np.asarray(a_finals, dtype=float)
    f_finals = np.asarray(f_finals, dtype=float)

    def _var(v):
        return float(np.var(v, ddof=1)) if v.size > 1 else 0.0

    pooled = np.sqrt((_var(a_finals) + _var(f_finals)) / 2.0)
    se = pooled * np.sqrt(1.0 / a_finals.size + 1.0 / f_finals.size)
    return float(max(GAP_TOL_FLOOR, 3.0 * se))


def final_elbos(model, data, states, s_eval: int = 2000) -> list:
    """Evaluate each state's ELBO under one shared noise block."""
    noise = NoiseBlock.from_seed([EVAL_SEED], s_eval, model, data.n)
    return [elbo_estimate(model, st, data, noise).value for st in states]


def oracle_optimum(model, data):
    """Closed-form factorized optimum for models that have one, else None."""
    if model.name == "linear":
        return linear_fvi_optimum(data, model.tau, model.sigma)
    if model.name == "saw":
        return saw_fvi_optimum(model, data)
    if model.name == "hmm":
        return hmm_fvi_optimum(data)
    return None


def build_gap_report(model, data, run_infos, s_eval: int = 2000) -> GapReport:
    """Assemble a GapReport from (algo_tag, seed, state, steps_to_conv,
    wall_to_conv) tuples. Verdicts compare each capacity's median final ELBO
    against the factorized family's median under the shared-block MC
    tolerance."""
    report = GapReport(model.name)
    states = [info[2] for info in run_infos]
    finals = final_elbos(model, data, states, s_eval)
    by_tag = {}
    for (tag, seed, _state, steps_c, wall_c), final in zip(run_infos, finals):
        by_tag.setdefault(tag, []).append(final)
        report.rows.append({
            "algo": tag, "seed": seed, "final_elbo": final,
            "steps_to_convergence": steps_c, "wall_ms_to_convergence": wall_c,
        })
    for tag, finals_t in by_tag.items():
        report.medians[tag] = float(np.median(finals_t))
    if "fvi" in by_tag:
        f = np.asarray(by_tag["fvi"], dtype=float)
        for tag, finals_t in by_tag.items():
            if tag == "fvi":
                continue
            a = np.asarray(finals_t, dtype=float)
            tol = mc_tolerance(a, f)
            report.tols[tag] = tol
            gap = report.medians["fvi"] - report.medians[tag]
            report.verdicts[tag] = "closed" if gap <= tol else "open"
    for row in report.rows:
        tag = row["algo"]
        if tag == "fvi" or "fvi" not in report.medians:
            row["ordering_ok"] = True
        else:
            row["ordering_ok"] = bool(
                report.medians[tag] <= report.medians["fvi"] + report.tols[tag]
            )
    opt = oracle_optimum(model, data)
    if opt is not None:
        report.oracle_elbo = final_elbos(model, data, [opt.as_state()], s_eval)[0]
    return report


# ---------------------------------------------------------------------------
# commands


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV_VAR) or "amortlab-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _data_path(out: Path, model_name: str) -> Path:
    return out / f"data_{model_name}.csv"


def cmd_simulate(args) -> int:
    cfg = _experiment_config(args)
    cfg.validate()
    out = _out_dir(args)
    model = build_model(cfg.model, cfg.window)
    for seed in cfg.seeds:
        data, _theta, _z = model.simulate(cfg.n, seed)
        meta = {"model": model.name, "seed": seed, "n": cfg.n, **model.hyper}
        path = out / f"data_{model.name}_seed{seed}.csv"
        save_dataset_csv(path, data, meta)
        print(f"wrote {path}")
    return 0


def _fit_one_seed(payload) -> dict:
    """Worker: fit one seed and write its run + state files. Picklable on
    purpose so seeds can fan out across processes."""
    cfg, meta, x, provenance, out_str, seed = payload
    out = Path(out_str)
    model = build_model(cfg.model, cfg.window, meta)
    data = Dataset(np.asarray(x), provenance)
    state = init_state(model, data, cfg, seed)
    ocfg = OptimizerConfig(lr=cfg.lr, max_steps=cfg.steps, s=cfg.samples,
                           seed=seed, minibatch_size=cfg.minibatch)
    try:
        record = fit(model, state, data, ocfg)
    except NumericalAbortError as exc:
        partial = getattr(exc, "partial_record", None)
        if partial is not None:
            save_run_csv(out / f"run_{model.name}_{partial.algo}_seed{seed}.csv",
                         partial)
        return {"seed": seed, "aborted": True, "message": str(exc)}
    save_run_csv(out / f"run_{model.name}_{record.algo}_seed{seed}.csv", record)
    save_state_csv(out / f"state_{model.name}_{record.algo}_seed{seed}.csv",
                   record.final_state, model)
    tail = record.converged_at or len(record.steps)
    return {"seed": seed, "aborted": False, "algo": record.algo,
            "final_elbo": record.final_elbo(), "steps": tail}


def cmd_fit(args) -> int:
    cfg = _experiment_config(args)
    cfg.validate()
    out = _out_dir(args)
    if args.data:
        data, meta = load_dataset_csv(args.data)
        model = build_model(cfg.model, cfg.window, meta)
        cfg.n = data.n
    else:
        model = build_model(cfg.model, cfg.window)
        data, _theta, _z = model.simulate(cfg.n, cfg.data_seed)
        meta = {"model": model.name, "seed": cfg.data_seed, "n": cfg.n,
                **model.hyper}
        save_dataset_csv(_data_path(out, model.name), data, meta)
    if model.window > data.n:
        raise UsageError("window must be <= n")
    payloads = [(cfg, meta, data.x, data.provenance, str(out), seed)
                for seed in cfg.seeds]
    # seeds fan out across workers; each worker owns its run/state files
    if len(payloads) == 1:
        results = [_fit_one_seed(payloads[0])]
    else:
        workers = min(len(payloads), os.cpu_count() or 1, 8)
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_one_seed, payloads))
    code = 0
    for res in sorted(results, key=lambda r: r["seed"]):
        if res["aborted"]:
            print(f"numerical abort (seed {res['seed']}): {res['message']}",
                  file=sys.stderr)
            code = 2
        else:
            print(f"fit {model.name} {res['algo']} seed={res['seed']}: "
                  f"elbo={res['final_elbo']:.3f} steps={res['steps']}")
    return code


def _find_runs(out: Path, model_name: str):
    infos = []
    for run_path in sorted(out.glob(f"run_{model_name}_*_seed*.csv")):
        run = load_run_csv(run_path)
        if run["error"] is not None or not run["steps"]:
            continue
        state_path = out / run_path.name.replace("run_", "state_", 1)
        if not state_path.exists():
            continue
        last = run["steps"][-1]
        infos.append({"algo": run["algo"], "seed": run["seed"],
                      "run_path": run_path, "state_path": state_path,
                      "steps_to_conv": last[0], "wall_to_conv": last[1]})
    return infos


def _read_header(path) -> dict:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def cmd_gap_report(args) -> int:
    out = _out_dir(args)
    model_name = args.model
    if model_name not in MODEL_FACTORIES:
        raise UsageError(f"unknown model {model_name!r}")
    data_file = Path(args.data) if args.data else _data_path(out, model_name)
    if not data_file.exists():
        raise UsageError(f"no dataset found at {data_file}")
    data, meta = load_dataset_csv(data_file)
    if meta.get("model", model_name) != model_name:
        raise UsageError(f"dataset at {data_file} was simulated from model "
                         f"{meta['model']!r}, not {model_name!r}")
    infos = _find_runs(out, model_name)
    if not infos:
        raise UsageError(f"no finished runs for model {model_name!r} in {out}")
    run_infos = []
    for info in infos:
        window = int(_read_header(info["state_path"]).get("window", 1))
        model = build_model(model_name, window, meta)
        state = load_state_csv(info["state_path"], model, data)
        run_infos.append((info["algo"], info["seed"], state,
                          info["steps_to_conv"], info["wall_to_conv"]))
    model = build_model(model_name, None, meta)
    report = build_gap_report(model, data, run_infos,
                              s_eval=args.samples or 2000)
    path = out / f"gap_report_{model_name}.csv"
    report.to_csv(path)
    opt = oracle_optimum(model, data)
    if opt is not None:
        dump_oracle_csv(out / f"oracle_{model_name}.csv", opt)
    for tag, verdict in sorted(report.verdicts.items()):
        print(f"{model_name} {tag}: median={report.medians[tag]:.3f} "
              f"fvi={report.medians['fvi']:.3f} tol={report.tols[tag]:.3f} "
              f"verdict={verdict}")
    print(f"wrote {path}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _experiment_config(args)
    cfg.validate()
    out = _out_dir(args)
    data_file = Path(args.data) if args.data else _data_path(out, cfg.model)
    if not data_file.exists():
        raise UsageError(f"no dataset found at {data_file}")
    data, meta = load_dataset_csv(data_file)
    for seed in cfg.seeds:
        matches = [p for p in sorted(out.glob(f"run_{cfg.model}_*_seed{seed}.csv"))
                   if "+fvi-refine" not in p.name]
        if args.algo_tag:
            matches = [p for p in matches
                       if p.name == f"run_{cfg.model}_{args.algo_tag}_seed{seed}.csv"]
        if not matches:
            raise UsageError(f"no run found for model {cfg.model!r} seed {seed}")
        run_path = matches[0]
        run = load_run_csv(run_path)
        if run["algo"] == "fvi":
            raise UsageError("diagnose expects an amortized or constant run; "
                             f"{run_path.name} is already factorized")
        state_path = out / run_path.name.replace("run_", "state_", 1)
        if not state_path.exists():
            raise UsageError(f"missing checkpoint {state_path}")
        window = int(_read_header(state_path).get("window", 1))
        model = build_model(cfg.model, window, meta)
        state = load_state_csv(state_path, model, data)
        record = RunRecord(model_tag=run["model"], algo=run["algo"],
                           seed=run["seed"], steps=list(run["steps"]),
                           final_state=state,
                           cfg=OptimizerConfig(lr=cfg.lr, max_steps=cfg.steps,
                                               s=cfg.samples, seed=seed))
        try:
            cont = refine_with_fvi(model, data, record, cfg.steps)
        except NumericalAbortError as exc:
            print(f"numerical abort: {exc}", file=sys.stderr)
            return 2
        if cont is record:
            print(f"{run['algo']} seed={seed}: verdict=no-op (0 extra steps)")
            continue
        save_run_csv(out / f"run_{cfg.model}_{cont.algo}_seed{seed}.csv", cont)
        phrase = ("closed within detection power" if cont.verdict == "closed"
                  else "open")
        print(f"{run['algo']} seed={seed}: verdict={phrase} "
              f"(base={record.final_elbo():.3f} refined={cont.final_elbo():.3f})")
    return 0


def cmd_figure_data(args) -> int:
    out = _out_dir(args)
    kind = args.figure
    if kind is None:
        raise UsageError("figure-data needs --figure "
                         "{paths,convergence_box,hmm_means}")
    if kind == "hmm_means":
        n = args.n or 100
        data = Dataset(np.ones((n, 1)), "external: constant ones")
        opt = hmm_fvi_optimum(data)
        unbalanced = hmm_unbalanced_mean_series(data)
        lines = ["site,mean,var,mean_unbalanced"]
        for i in range(n):
            lines.append(f"{i},{float(opt.site_means[i])!r},"
                         f"{float(opt.site_vars[i])!r},{float(unbalanced[i])!r}")
        path = out / "fig_hmm_means.csv"
        path.write_text("\n".join(lines) + "\n")
        print(f"wrote {path}")
        return 0
    model_name = args.model
    if model_name not in MODEL_FACTORIES:
        raise UsageError(f"unknown model {model_name!r}")
    if kind == "paths":
        run_paths = sorted(out.glob(f"run_{model_name}_*_seed*.csv"))
        if not run_paths:
            raise UsageError(f"no runs for model {model_name!r} in {out}")
        lines = ["algo,capacity,step,wall_time_ms,elbo"]
        for run_path in run_paths:
            run = load_run_csv(run_path)
            algo, capacity = split_algo_tag(run["algo"])
            for step, wall, elbo in run["steps"]:
                lines.append(f"{algo},{capacity},{step},{wall:.3f},{elbo!r}")
        path = out / f"fig_paths_{model_name}.csv"
    elif kind == "convergence_box":
        infos = _find_runs(out, model_name)
        if not infos:
            raise UsageError(f"no finished runs for model {model_name!r} in {out}")
        lines = ["algo,capacity,seed,final_elbo,steps_to_convergence,"
                 "wall_ms_to_convergence"]
        for info in infos:
            run = load_run_csv(info["run_path"])
            algo, capacity = split_algo_tag(info["algo"])
            final = run["steps"][-1][2]
            lines.append(f"{algo},{capacity},{info['seed']},{final!r},"
                         f"{info['steps_to_conv']},{info['wall_to_conv']:.3f}")
        path = out / f"fig_convergence_box_{model_name}.csv"
    else:
        raise UsageError(f"unknown figure kind {kind!r}")
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    file_vals = parse_config(args.config) if getattr(args, "config", None) else {}
    casts = {
        "model": str, "n": int, "algo": str, "kind": str, "degree": int,
        "width": int, "window": int, "steps": int, "samples": int,
        "lr": float, "minibatch": int, "data_seed": int,
    }
    for key, cast in casts.items():
        if key in file_vals:
            setattr(cfg, key, cast(file_vals[key]))
    if "seeds" in file_vals:
        cfg.seeds = [int(s) for s in file_vals["seeds"].split(",") if s]
    for key in casts:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",") if s]
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--model", help="zoo model name")
    p.add_argument("--n", type=int, help="number of sites")
    p.add_argument("--algo", choices=["fvi", "constant", "avi"], help="family")
    p.add_argument("--kind", choices=["poly", "mlp"], help="inference-fn kind")
    p.add_argument("--degree", type=int, help="polynomial degree")
    p.add_argument("--width", type=int, help="mlp hidden width")
    p.add_argument("--window", type=int, help="observation window")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--steps", type=int, help="max optimization steps")
    p.add_argument("--samples", type=int, help="Monte-Carlo samples per step")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--minibatch", type=int, help="site minibatch size")
    p.add_argument("--data-seed", type=int, dest="data_seed",
                   help="seed for the shared dataset simulation")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR})")
    p.add_argument("--data", help="explicit dataset CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amortlab",
                     description="amortized variational inference workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("fit", cmd_fit),
                     ("gap-report", cmd_gap_report), ("diagnose", cmd_diagnose),
                     ("figure-data", cmd_figure_data)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)
        if name == "figure-data":
            p.add_argument("--figure",
                           choices=["paths", "convergence_box", "hmm_means"],
                           help="which plot-data CSV to emit")
        if name == "diagnose":
            p.add_argument("--algo-tag", dest="algo_tag",
                           help="exact algo tag of the run to refine")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
