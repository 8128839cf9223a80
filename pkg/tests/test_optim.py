"""Optimizer tests: Adam update algebra, fit determinism and convergence,
the factorized-refinement diagnostic, and run CSV round trips."""

import numpy as np
import pytest

from amortlab import (
    AmortizedState,
    ConstantFactorState,
    FactorizedState,
    NumericalAbortError,
    OptimizerConfig,
    fit,
    load_run_csv,
    make_model,
    refine_with_fvi,
    save_run_csv,
)
from amortlab.oracles import cavi_residual, linear_fvi_optimum
from amortlab.optim import adam_step


class TestAdamStep:
    def test_matches_hand_computed_update(self):
        cfg = OptimizerConfig(lr=0.1, beta1=0.9, beta2=0.99, eps=1e-8)
        p = np.array([1.0, -2.0])
        g = np.array([0.5, 3.0])
        moments = (np.zeros(2), np.zeros(2))
        p1, (m, v) = adam_step(p, g, moments, 1, cfg)
        assert np.allclose(m, 0.1 * g)
        assert np.allclose(v, 0.01 * g * g)
        # bias correction cancels the (1 - beta) factors at t = 1
        expect = p + cfg.lr * g / (np.abs(g) + cfg.eps)
        assert np.allclose(p1, expect, rtol=0, atol=1e-14)

    def test_first_step_magnitude_is_lr(self):
        # with fresh moments every coordinate moves by ~lr regardless of the
        # gradient scale
        cfg = OptimizerConfig(lr=2e-3)
        g = np.array([1e-4, -7.0, 300.0])
        p1, _ = adam_step(np.zeros(3), g, (np.zeros(3), np.zeros(3)), 1, cfg)
        assert np.allclose(np.abs(p1), cfg.lr, rtol=1e-4)
        assert np.all(np.sign(p1) == np.sign(g))

    def test_second_step_uses_accumulated_moments(self):
        cfg = OptimizerConfig(lr=0.05)
        p = np.zeros(1)
        g1, g2 = np.array([2.0]), np.array([-1.0])
        p, mom = adam_step(p, g1, (np.zeros(1), np.zeros(1)), 1, cfg)
        p2, mom = adam_step(p, g2, mom, 2, cfg)
        m = cfg.beta1 * (1 - cfg.beta1) * g1 + (1 - cfg.beta1) * g2
        v = cfg.beta2 * (1 - cfg.beta2) * g1**2 + (1 - cfg.beta2) * g2**2
        m_hat = m / (1 - cfg.beta1**2)
        v_hat = v / (1 - cfg.beta2**2)
        assert np.allclose(p2, p + cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))

    def test_step_index_counts_from_one(self):
        cfg = OptimizerConfig()
        with pytest.raises(ValueError):
            adam_step(np.zeros(1), np.zeros(1), (np.zeros(1), np.zeros(1)), 0, cfg)


class TestFit:
    def test_deterministic_rerun(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(5, 3)
        cfg = OptimizerConfig(lr=0.02, max_steps=40, s=10, seed=7,
                              convergence_window=None)
        recs = [fit(m, FactorizedState.init(m, data), data, cfg) for _ in range(2)]
        assert np.array_equal(recs[0].elbo_trace(), recs[1].elbo_trace())
        assert np.array_equal(recs[0].final_state.param_vector(),
                              recs[1].final_state.param_vector())

    def test_minibatch_run_is_deterministic_and_distinct(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(8, 3)
        base = OptimizerConfig(lr=0.02, max_steps=30, s=10, seed=7,
                               convergence_window=None)
        mb = OptimizerConfig(lr=0.02, max_steps=30, s=10, seed=7,
                             convergence_window=None, minibatch_size=3)
        full = fit(m, FactorizedState.init(m, data), data, base)
        a = fit(m, FactorizedState.init(m, data), data, mb)
        b = fit(m, FactorizedState.init(m, data), data, mb)
        assert np.array_equal(a.elbo_trace(), b.elbo_trace())
        assert not np.array_equal(a.elbo_trace(), full.elbo_trace())

    def test_max_steps_zero_returns_initial_state(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(4, 0)
        st = FactorizedState.init(m, data)
        rec = fit(m, st, data, OptimizerConfig(max_steps=0))
        assert rec.steps == []
        assert rec.final_state is st
        with pytest.raises(ValueError):
            rec.final_elbo()

    def test_recovers_linear_optimum(self):
        """Annealed Adam ascent drives the factorized state to the analytic
        optimum: CAVI residual and factor means within 1e-2.

        Constant-lr Adam plateaus at a noise floor proportional to lr, so the
        schedule shrinks lr while growing the sample count."""
        m = make_model("linear")
        data, _t, _z = m.simulate(6, 11)
        st = FactorizedState.init(m, data)
        for lr, steps, s, seed in [(0.05, 500, 60, 1), (8e-3, 400, 300, 2),
                                   (1.5e-3, 400, 1500, 3), (3e-4, 300, 6000, 4)]:
            cfg = OptimizerConfig(lr=lr, max_steps=steps, s=s, seed=seed,
                                  convergence_window=None)
            st = fit(m, st, data, cfg).final_state
        assert cavi_residual(m, st, data) < 1e-2
        opt = linear_fvi_optimum(data, m.tau, m.sigma)
        got = st.factor_arrays(m, data)[2][:, 0]
        assert np.max(np.abs(got - opt.site_means)) < 1e-2

    def test_wall_times_monotone(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(4, 2)
        cfg = OptimizerConfig(max_steps=25, s=5, convergence_window=None)
        rec = fit(m, FactorizedState.init(m, data), data, cfg)
        walls = np.array([s[1] for s in rec.steps])
        assert np.all(np.diff(walls) >= 0)
        assert [s[0] for s in rec.steps] == list(range(1, 26))

    def test_convergence_rule_stops_on_plateau(self):
        # starting at the analytic optimum the trace is flat, so the run must
        # stop as soon as two full windows exist
        m = make_model("linear")
        data, _t, _z = m.simulate(6, 11)
        st = linear_fvi_optimum(data, m.tau, m.sigma).as_state()
        cfg = OptimizerConfig(lr=1e-3, max_steps=500, s=50, seed=3,
                              convergence_window=10)
        rec = fit(m, st, data, cfg)
        assert rec.converged_at == 20
        assert len(rec.steps) == 20

    def test_window_none_disables_early_stop(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(6, 11)
        st = linear_fvi_optimum(data, m.tau, m.sigma).as_state()
        cfg = OptimizerConfig(lr=1e-3, max_steps=30, s=20, seed=3,
                              convergence_window=None)
        rec = fit(m, st, data, cfg)
        assert rec.converged_at is None
        assert len(rec.steps) == 30

    def test_abort_carries_partial_record(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(3, 0)
        st = FactorizedState.init(m, data)
        vec = st.param_vector()
        vec[2] = 1e200  # site 0 mean overflows the emission quadratic
        st = st.with_params(vec)
        cfg = OptimizerConfig(max_steps=10, s=4, seed=0)
        with pytest.raises(NumericalAbortError) as exc_info:
            fit(m, st, data, cfg)
        exc = exc_info.value
        assert exc.step == 1
        rec = exc.partial_record
        assert rec.error.startswith("step 1:")
        assert rec.steps == []


class TestRefine:
    def _converged_linear_run(self, state_kind):
        # sample count sized so tail-median noise sits well below the verdict
        # threshold of 1e-3 * |median|
        m = make_model("linear")
        data, _t, _z = m.simulate(6, 19)
        if state_kind == "fvi":
            st = linear_fvi_optimum(data, m.tau, m.sigma).as_state()
        else:
            st = ConstantFactorState.init(m)
        cfg = OptimizerConfig(lr=0.03, max_steps=600, s=800, seed=5,
                              convergence_window=80)
        return m, data, fit(m, st, data, cfg)

    def test_zero_extra_steps_is_a_no_op(self):
        m, data, rec = self._converged_linear_run("fvi")
        assert refine_with_fvi(m, data, rec, 0) is rec

    def test_closed_at_the_optimum(self):
        # refining an already-optimal factorized run finds nothing
        m, data, rec = self._converged_linear_run("fvi")
        cont = refine_with_fvi(m, data, rec, 160)
        assert cont.verdict == "closed"
        assert cont.algo == "fvi+fvi-refine"
        assert cont.seed == rec.seed + 1

    def test_open_for_capacity_limited_family(self):
        # the shared-factor family cannot match per-site posteriors on spread
        # data, so freeing the factors recovers head room
        m, data, rec = self._converged_linear_run("constant")
        cont = refine_with_fvi(m, data, rec, 400)
        assert cont.verdict == "open"
        assert cont.final_elbo() > rec.final_elbo()
        assert cont.algo.endswith("+fvi-refine")

    def test_missing_config_rejected(self):
        m = make_model("linear")
        data, _t, _z = m.simulate(4, 0)
        cfg = OptimizerConfig(max_steps=5, s=5, convergence_window=None)
        rec = fit(m, FactorizedState.init(m, data), data, cfg)
        rec.cfg = None
        with pytest.raises(ValueError):
            refine_with_fvi(m, data, rec, 10)

    def test_refine_from_amortized_state(self):
        # embedding an inference-function state and refining keeps the trace
        # finite and tags the algorithm
        m = make_model("saw")
        data, _t, _z = m.simulate(5, 2)
        st = AmortizedState.init(m, kind="mlp", width=3, seed=0)
        cfg = OptimizerConfig(lr=0.02, max_steps=120, s=30, seed=2,
                              convergence_window=None)
        rec = fit(m, st, data, cfg)
        cont = refine_with_fvi(m, data, rec, 120)
        assert cont.algo == rec.algo + "+fvi-refine"
        assert np.all(np.isfinite(cont.elbo_trace()))


class TestRunCsv:
    def test_round_trip(self, tmp_path):
        m = make_model("linear")
        data, _t, _z = m.simulate(4, 6)
        cfg = OptimizerConfig(max_steps=12, s=5, seed=3, convergence_window=None)
        rec = fit(m, FactorizedState.init(m, data), data, cfg)
        path = tmp_path / "run.csv"
        save_run_csv(path, rec)
        header = path.read_text().splitlines()[0]
        assert header == "model,algo,seed,step,wall_time_ms,elbo,error"
        back = load_run_csv(path)
        assert back["model"] == "linear"
        assert back["algo"] == "fvi"
        assert back["seed"] == 3
        assert back["error"] is None
        assert [s[0] for s in back["steps"]] == [s[0] for s in rec.steps]
        # elbo values survive exactly through repr
        assert [s[2] for s in back["steps"]] == [s[2] for s in rec.steps]

    def test_error_row_with_commas_round_trips(self, tmp_path):
        m = make_model("linear")
        data, _t, _z = m.simulate(3, 0)
        st = FactorizedState.init(m, data)
        vec = st.param_vector()
        vec[2] = 1e200
        st = st.with_params(vec)
        with pytest.raises(NumericalAbortError) as exc_info:
            fit(m, st, data, OptimizerConfig(max_steps=5, s=4))
        rec = exc_info.value.partial_record
        assert "," in rec.error  # "... at sample i, site n"
        path = tmp_path / "aborted.csv"
        save_run_csv(path, rec)
        back = load_run_csv(path)
        assert back["error"] == rec.error
        assert back["steps"] == []
