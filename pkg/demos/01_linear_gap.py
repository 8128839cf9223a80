"""The amortization gap on the one model where we know the answer exactly.

The linear-Gaussian model has a closed-form posterior, so the factorized
optimum is computable and every trained family can be scored against it.
Three families enter: free per-site factors (the ceiling), a 5-parameter
affine map from each observation to its factor, and a single factor shared
by all sites (the floor). The punchline is that the affine map matches the
free factors despite carrying a constant number of parameters while the
factorized family carries 2N + 2.

CLI equivalent:
    amortlab gap-report --model linear --n 300 --algo fvi --seeds 0,1,2 ...
"""

import numpy as np

import amortlab as al

N = 300
SEEDS = (0, 1, 2)
STAGES = [(0.08, 500, 10), (0.01, 500, 10), (2e-3, 300, 30)]


def anneal(model, state, data, seed):
    # step down lr while stepping up the sample count: cheap exploration
    # first, low-variance polish last
    total = 0
    for i, (lr, steps, s) in enumerate(STAGES):
        cfg = al.OptimizerConfig(lr=lr, max_steps=steps, s=s, seed=7 * seed + i,
                                 convergence_window=None)
        rec = al.fit(model, state, data, cfg)
        state = rec.final_state
        total += steps
    return state, total


def main():
    model = al.make_model("linear")
    data, theta, z = model.simulate(N, 909)
    print(f"linear model, N={N} sites, one global parameter")

    post = al.linear_exact_posterior(data, model.tau, model.sigma)
    print(f"exact posterior known: global mean {post.mean[0]:+.4f}")

    run_infos = []
    for tag, init in [
        ("fvi", lambda s: al.FactorizedState.init(model, data)),
        ("avi", lambda s: al.AmortizedState.init(model, kind="poly", degree=1,
                                                 seed=s)),
        ("constant", lambda s: al.ConstantFactorState.init(model)),
    ]:
        for seed in SEEDS:
            state, steps = anneal(model, init(seed), data, seed)
            run_infos.append((tag, seed, state, steps, 0.0))
        n_params = run_infos[-1][2].param_vector().size
        print(f"  trained {tag:9s} x{len(SEEDS)} seeds ({n_params} parameters)")

    report = al.build_gap_report(model, data, run_infos, s_eval=500)
    print()
    print(f"oracle ELBO (factorized optimum): {report.oracle_elbo:10.2f}")
    for tag in ("fvi", "avi", "constant"):
        line = f"{tag:9s} median {report.medians[tag]:10.2f}"
        if tag != "fvi":
            gap = report.medians["fvi"] - report.medians[tag]
            line += (f"   gap to fvi {gap:+9.2f}"
                     f"   tol {report.tols[tag]:6.2f}   -> {report.verdicts[tag]}")
        print(line)
    print()
    print("the affine map closes the gap with 5 parameters; the shared factor")
    print("cannot, because the per-site posterior mean actually depends on x_i.")


if __name__ == "__main__":
    main()
