"""A model where the pathwise estimator bites back, and width pays off.

Each site observes x_i = theta + z_i (1 + sin z_i) + noise whose scale
max(|cos z_i|, floor) nearly vanishes on bands of z. Gradients through the
likelihood are heavy tailed there: one unlucky draw produces a spike several
orders of magnitude above the typical gradient, Adam's second-moment average
then freezes that coordinate, and the entropy term quietly ratchets the
factor's log-std upward in the meantime. Untamed, free-factor training
collapses from a random init.

The protocol below tames it for every family the same way:
  * moment-matched global init: E[z (1 + sin z)] = exp(-1/2) under the
    standard normal prior, so theta_0 = x_bar - exp(-1/2),
  * site log-stds started at -1.5 so early draws stay off the bands,
  * a gentle anneal, stepping lr down and the sample count up.

One seed per family keeps this demo near two minutes on a laptop core; the
ten-seed median comparison with Monte-Carlo tolerances lives in
tests/test_acceptance.py.
"""

import time

import numpy as np

import amortlab as al

N = 1000
STAGES = [(1e-3, 1200, 100), (3e-4, 800, 200), (1e-4, 400, 300)]


def tamed_init(model, data, make_state):
    theta0 = float(np.mean(data.x)) - float(np.exp(-0.5))
    state = make_state()
    vec = state.param_vector().copy()
    if isinstance(state, al.FactorizedState):
        state = state.with_params(vec)
        tm, tl, zm, zl, _ = state.factor_arrays(model, data)
        tm[0] = theta0
        tl[0] = -2.0
        zl[:] = -1.5
        return state
    vec[0] = theta0
    vec[1] = -2.0
    vec[-1] = -1.5    # log-std head bias
    return state.with_params(vec)


def main():
    model = al.make_model("nonlinear")
    data, theta, z = model.simulate(N, 55)
    print(f"nonlinear model, N={N}, true theta {float(np.ravel(theta)[0]):+.3f}")
    print(f"anneal: {STAGES}")

    arms = [
        ("fvi", 1, lambda: al.FactorizedState.init(model, data)),
        ("affine map", 900, lambda: al.AmortizedState.init(model, kind="poly",
                                                           degree=1, seed=301)),
        ("mlp width 16", 1, lambda: al.AmortizedState.init(model, kind="mlp",
                                                           width=16, seed=100)),
    ]
    eval_noise = al.NoiseBlock.from_seed([909_090], 400, model, data.n)

    finals = {}
    counts = {}
    for tag, seed0, make_state in arms:
        state = tamed_init(model, data, make_state)
        counts[tag] = state.param_vector().size
        t0 = time.time()
        for i, (lr, steps, s) in enumerate(STAGES):
            cfg = al.OptimizerConfig(lr=lr, max_steps=steps, s=s, seed=seed0 + i,
                                     convergence_window=None)
            rec = al.fit(model, state, data, cfg)
            state = rec.final_state
        finals[tag] = al.elbo_estimate(model, state, data, eval_noise).value
        print(f"  {tag:13s} {counts[tag]:5d} params  final ELBO "
              f"{finals[tag]:10.1f}  [{time.time() - t0:.0f}s]")

    print()
    best = max(finals, key=finals.get)
    print(f"best single-seed arm here: {best}")
    if finals["mlp width 16"] >= finals["fvi"]:
        print(f"the {counts['mlp width 16']}-parameter map kept up with (or "
              f"beat) {counts['fvi']} free parameters")
        print("at a matched step budget: the map averages its gradient over")
        print("all sites, so spike gradients from any one site's bad draw get")
        print("diluted, while a free factor takes the full hit.")
    else:
        print("on this seed the free factors finished ahead; across seeds the")
        print("map's site-averaged gradients usually make it the stabler arm.")


if __name__ == "__main__":
    main()
