"""Command-line interface tests: exit codes, file contracts, reruns.

Commands are driven in process through main(argv); one test goes through the
installed console script to cover packaging.
"""

import subprocess
import sys

import numpy as np
import pytest

from amortlab.cli import (
    GAP_TOL_FLOOR,
    emit_config,
    main,
    mc_tolerance,
    parse_config,
    split_algo_tag,
)
from amortlab.models import load_dataset_csv
from amortlab.optim import load_run_csv


def run_cli(*argv):
    return main([str(a) for a in argv])


def fit_linear(out, algo="fvi", seeds="0", steps=12, extra=()):
    return run_cli("fit", "--model", "linear", "--n", "6", "--algo", algo,
                   "--seeds", seeds, "--steps", steps, "--samples", "8",
                   "--lr", "0.02", "--out", out, *extra)


class TestSplitAlgoTag:
    def test_plain_and_composite_tags(self):
        assert split_algo_tag("fvi") == ("fvi", "fvi")
        assert split_algo_tag("avi-mlp-k20-w2") == ("avi", "avi-mlp-k20-w2")
        assert split_algo_tag("constant+fvi-refine") == (
            "constant", "constant+fvi-refine")


class TestMcTolerance:
    def test_floor_applies_to_tight_seeds(self):
        assert mc_tolerance([1.0, 1.0, 1.0], [2.0, 2.0]) == GAP_TOL_FLOOR

    def test_single_seed_does_not_crash(self):
        assert mc_tolerance([1.0], [2.0]) == GAP_TOL_FLOOR

    def test_three_pooled_standard_errors(self):
        a = [0.0, 40.0]  # var 800
        f = [10.0, 30.0]  # var 200
        pooled = np.sqrt((800 + 200) / 2)
        expect = 3 * pooled * np.sqrt(0.5 + 0.5)
        assert mc_tolerance(a, f) == pytest.approx(expect)


class TestConfigFiles:
    def test_round_trip_idempotent(self, tmp_path):
        cfg = {"model": "saw", "n": "40", "seeds": "0,1,2", "lr": "0.005"}
        path = tmp_path / "exp.cfg"
        emit_config(cfg, path)
        assert parse_config(path) == cfg
        emit_config(parse_config(path), path)
        assert parse_config(path) == cfg

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# experiment\n\nmodel = hmm\nn = 7\n")
        assert parse_config(path) == {"model": "hmm", "n": "7"}

    def test_bad_line_is_a_usage_error(self, tmp_path, capsys):
        path = tmp_path / "exp.cfg"
        path.write_text("model hmm\n")
        code = run_cli("simulate", "--config", path, "--out", tmp_path)
        assert code == 1
        assert "bad config line" in capsys.readouterr().err

    def test_config_supplies_flags_and_cli_overrides(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        emit_config({"model": "hmm", "n": "7", "seeds": "4"}, cfg_path)
        assert run_cli("simulate", "--config", cfg_path, "--out", tmp_path) == 0
        data, meta = load_dataset_csv(tmp_path / "data_hmm_seed4.csv")
        assert data.n == 7
        # explicit flag wins over the file value
        assert run_cli("simulate", "--config", cfg_path, "--n", "3",
                       "--out", tmp_path) == 0
        data, _meta = load_dataset_csv(tmp_path / "data_hmm_seed4.csv")
        assert data.n == 3


class TestExitCodes:
    def test_unknown_model_is_usage_error(self, tmp_path, capsys):
        assert run_cli("simulate", "--model", "quux", "--out", tmp_path) == 1
        assert "unknown model" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, tmp_path):
        assert run_cli("simulate", "--frobnicate", "--out", tmp_path) == 1

    def test_window_larger_than_n_rejected(self, tmp_path):
        assert run_cli("simulate", "--model", "saw", "--n", "3",
                       "--window", "5", "--out", tmp_path) == 1

    def test_numerical_abort_exits_two(self, tmp_path, capsys):
        # a huge learning rate overflows the quadratic terms within a few
        # steps; the partial trace must still land on disk
        code = fit_linear(tmp_path, steps=30, extra=("--lr", "1e160"))
        assert code == 2
        assert "numerical abort" in capsys.readouterr().err
        run = load_run_csv(tmp_path / "run_linear_fvi_seed0.csv")
        assert run["error"] is not None

    def test_success_is_zero(self, tmp_path):
        assert run_cli("simulate", "--model", "linear", "--n", "4",
                       "--out", tmp_path) == 0


class TestSimulate:
    def test_writes_one_file_per_seed(self, tmp_path):
        assert run_cli("simulate", "--model", "linear", "--n", "9",
                       "--seeds", "2,5", "--out", tmp_path) == 0
        for seed in (2, 5):
            data, meta = load_dataset_csv(tmp_path / f"data_linear_seed{seed}.csv")
            assert data.n == 9
            assert meta["model"] == "linear"
            assert int(meta["seed"]) == seed

    def test_out_defaults_to_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AMORTLAB_OUT", str(tmp_path / "envout"))
        assert run_cli("simulate", "--model", "hmm", "--n", "4") == 0
        assert (tmp_path / "envout" / "data_hmm_seed0.csv").exists()


class TestFit:
    def test_single_seed_writes_run_state_and_dataset(self, tmp_path, capsys):
        assert fit_linear(tmp_path) == 0
        assert (tmp_path / "data_linear.csv").exists()
        assert (tmp_path / "state_linear_fvi_seed0.csv").exists()
        run = load_run_csv(tmp_path / "run_linear_fvi_seed0.csv")
        assert run["algo"] == "fvi"
        assert len(run["steps"]) == 12
        assert "elbo=" in capsys.readouterr().out

    def test_seeds_fan_out(self, tmp_path):
        assert fit_linear(tmp_path, seeds="0,1,2") == 0
        for seed in range(3):
            assert (tmp_path / f"run_linear_fvi_seed{seed}.csv").exists()
            assert (tmp_path / f"state_linear_fvi_seed{seed}.csv").exists()

    def test_fit_against_explicit_dataset(self, tmp_path):
        assert run_cli("simulate", "--model", "linear", "--n", "5",
                       "--seeds", "7", "--out", tmp_path) == 0
        code = fit_linear(tmp_path,
                          extra=("--data", tmp_path / "data_linear_seed7.csv"))
        assert code == 0
        ref, _meta = load_dataset_csv(tmp_path / "data_linear_seed7.csv")
        assert ref.n == 5  # run used the 5-site file, not --n

    def test_rerun_reproduces_everything_but_wall_time(self, tmp_path):
        def strip_wall(path):
            lines = path.read_text().splitlines()
            return [",".join(c for i, c in enumerate(l.split(",")) if i != 4)
                    for l in lines]

        for sub in ("a", "b"):
            assert fit_linear(tmp_path / sub, algo="avi", seeds="0,1") == 0
        names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
        assert names == sorted(p.name for p in (tmp_path / "b").glob("*.csv"))
        for name in names:
            a, b = tmp_path / "a" / name, tmp_path / "b" / name
            if name.startswith("run_"):
                assert strip_wall(a) == strip_wall(b), name
            else:
                assert a.read_bytes() == b.read_bytes(), name


class TestGapReport:
    @pytest.fixture()
    def fitted_out(self, tmp_path):
        assert fit_linear(tmp_path, algo="fvi", seeds="0,1") == 0
        assert fit_linear(tmp_path, algo="avi", seeds="0,1") == 0
        return tmp_path

    def test_report_and_oracle_files(self, fitted_out, capsys):
        assert run_cli("gap-report", "--model", "linear", "--samples", "200",
                       "--out", fitted_out) == 0
        out = capsys.readouterr().out
        assert "verdict=" in out
        lines = (fitted_out / "gap_report_linear.csv").read_text().splitlines()
        assert lines[0] == ("model,algo,capacity,seed,final_elbo,"
                            "steps_to_convergence,wall_ms_to_convergence,"
                            "median_final_elbo,fvi_median,oracle_elbo,mc_tol,"
                            "verdict,ordering_ok")
        rows = [l.split(",") for l in lines[1:]]
        assert len(rows) == 4  # 2 algos x 2 seeds
        byalgo = {r[1] for r in rows}
        assert byalgo == {"fvi", "avi"}
        for r in rows:
            assert r[0] == "linear"
            float(r[4]), float(r[8]), float(r[9])  # parseable numerics
            assert r[12] in ("True", "False")
            if r[1] == "avi":
                assert r[11] in ("open", "closed")
        oracle = (fitted_out / "oracle_linear.csv").read_text().splitlines()
        assert oracle[0] == "site,mean,var"
        assert len(oracle) == 7

    def test_missing_dataset_is_usage_error(self, tmp_path):
        assert run_cli("gap-report", "--model", "linear", "--out", tmp_path) == 1

    def test_dataset_from_other_model_rejected(self, fitted_out, capsys):
        assert run_cli("simulate", "--model", "hmm", "--n", "6",
                       "--out", fitted_out) == 0
        code = run_cli("gap-report", "--model", "linear", "--out", fitted_out,
                       "--data", fitted_out / "data_hmm_seed0.csv")
        assert code == 1
        assert "simulated from model" in capsys.readouterr().err

    def test_no_runs_is_usage_error(self, tmp_path):
        assert run_cli("simulate", "--model", "linear", "--n", "4",
                       "--out", tmp_path) == 0
        (tmp_path / "data_linear.csv").write_bytes(
            (tmp_path / "data_linear_seed0.csv").read_bytes())
        assert run_cli("gap-report", "--model", "linear", "--out", tmp_path) == 1


class TestDiagnose:
    def test_rejects_factorized_runs(self, tmp_path, capsys):
        assert fit_linear(tmp_path, algo="fvi") == 0
        code = run_cli("diagnose", "--model", "linear", "--seeds", "0",
                       "--steps", "10", "--out", tmp_path)
        assert code == 1
        assert "already factorized" in capsys.readouterr().err

    def test_refines_constant_run(self, tmp_path, capsys):
        assert fit_linear(tmp_path, algo="constant", steps=20) == 0
        code = run_cli("diagnose", "--model", "linear", "--seeds", "0",
                       "--steps", "20", "--samples", "8", "--out", tmp_path)
        assert code == 0
        out = capsys.readouterr().out
        assert "verdict=open" in out or "verdict=closed within detection power" in out
        refined = load_run_csv(
            tmp_path / "run_linear_constant+fvi-refine_seed0.csv")
        assert refined["algo"] == "constant+fvi-refine"
        assert len(refined["steps"]) == 20

    def test_zero_steps_is_a_no_op(self, tmp_path, capsys):
        assert fit_linear(tmp_path, algo="constant") == 0
        code = run_cli("diagnose", "--model", "linear", "--seeds", "0",
                       "--steps", "0", "--out", tmp_path)
        assert code == 0
        assert "no-op" in capsys.readouterr().out
        assert not list(tmp_path.glob("run_*refine*"))

    def test_refined_runs_are_not_rediagnosed(self, tmp_path):
        # a second diagnose must pick the original run again, not its
        # refinement product
        assert fit_linear(tmp_path, algo="constant", steps=20) == 0
        for _ in range(2):
            assert run_cli("diagnose", "--model", "linear", "--seeds", "0",
                           "--steps", "10", "--samples", "8",
                           "--out", tmp_path) == 0
        names = sorted(p.name for p in tmp_path.glob("run_*.csv"))
        assert names == ["run_linear_constant+fvi-refine_seed0.csv",
                         "run_linear_constant_seed0.csv"]

    def test_missing_run_is_usage_error(self, tmp_path):
        assert run_cli("simulate", "--model", "linear", "--n", "6",
                       "--out", tmp_path) == 0
        (tmp_path / "data_linear.csv").write_bytes(
            (tmp_path / "data_linear_seed0.csv").read_bytes())
        assert run_cli("diagnose", "--model", "linear", "--seeds", "0",
                       "--steps", "5", "--out", tmp_path) == 1


class TestFigureData:
    def test_requires_figure_kind(self, tmp_path):
        assert run_cli("figure-data", "--model", "linear", "--out", tmp_path) == 1

    def test_paths_columns(self, tmp_path):
        assert fit_linear(tmp_path, algo="fvi", steps=7) == 0
        assert fit_linear(tmp_path, algo="avi", steps=7) == 0
        assert run_cli("figure-data", "--figure", "paths", "--model", "linear",
                       "--out", tmp_path) == 0
        lines = (tmp_path / "fig_paths_linear.csv").read_text().splitlines()
        assert lines[0] == "algo,capacity,step,wall_time_ms,elbo"
        rows = [l.split(",") for l in lines[1:]]
        assert len(rows) == 14  # 7 steps x 2 runs
        assert {r[0] for r in rows} == {"fvi", "avi"}
        for r in rows:
            int(r[2]), float(r[3]), float(r[4])

    def test_convergence_box_columns(self, tmp_path):
        assert fit_linear(tmp_path, seeds="0,1", steps=6) == 0
        assert run_cli("figure-data", "--figure", "convergence_box",
                       "--model", "linear", "--out", tmp_path) == 0
        lines = (tmp_path / "fig_convergence_box_linear.csv").read_text().splitlines()
        assert lines[0] == ("algo,capacity,seed,final_elbo,"
                            "steps_to_convergence,wall_ms_to_convergence")
        assert len(lines) == 3
        for l in lines[1:]:
            r = l.split(",")
            assert r[0] == "fvi"
            int(r[2]), float(r[3]), int(r[4]), float(r[5])

    def test_smoother_means_figure(self, tmp_path):
        assert run_cli("figure-data", "--figure", "hmm_means", "--n", "12",
                       "--out", tmp_path) == 0
        text = (tmp_path / "fig_hmm_means.csv").read_text()
        assert "np.float64" not in text
        lines = text.splitlines()
        assert lines[0] == "site,mean,var,mean_unbalanced"
        assert len(lines) == 13
        rows = np.array([[float(v) for v in l.split(",")] for l in lines[1:]])
        assert np.allclose(rows[:, 1], 1.0, atol=1e-10)  # derived means flat
        assert np.allclose(rows[1:-1, 2], 1 / 3) and rows[0, 2] == 0.5
        assert np.ptp(rows[:, 3]) > 0.1  # unbalanced series is not flat

    def test_missing_runs_is_usage_error(self, tmp_path):
        assert run_cli("figure-data", "--figure", "paths", "--model", "linear",
                       "--out", tmp_path) == 1


class TestConsoleScript:
    def test_installed_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "amortlab", "simulate", "--model", "linear",
             "--n", "4", "--out", str(tmp_path)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "data_linear_seed0.csv").exists()
