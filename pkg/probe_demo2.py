import time
import numpy as np
import amortlab as al

m = al.make_model("nonlinear")
data, theta, z = m.simulate(200, 13)
theta0 = float(np.mean(data.x)) - float(np.exp(-0.5))

def prep_fvi(seed):
    st = al.FactorizedState.init(m, data)
    vec = st.param_vector().copy()
    st = st.with_params(vec)
    tm, tl, zm, zl, _ = st.factor_arrays(m, data)
    tm[0] = theta0
    tl[0] = -2.0
    zl[:] = -1.5
    return st

def prep_avi(kind, seed, **kw):
    st = al.AmortizedState.init(m, kind=kind, seed=seed, **kw)
    vec = st.param_vector().copy()
    vec[0] = theta0
    vec[1] = -2.0
    vec[-1] = -1.5
    return st.with_params(vec)

stages = [(1e-3, 1200, 100), (3e-4, 600, 200)]

def run(st, seed):
    for i, (lr, steps, s) in enumerate(stages):
        cfg = al.OptimizerConfig(lr=lr, max_steps=steps, s=s,
                                 seed=31 * seed + i, convergence_window=None)
        rec = al.fit(m, st, data, cfg)
        st = rec.final_state
    return st

eval_noise = al.NoiseBlock.from_seed([4242], 400, m, data.n)
t0 = time.time()
rows = []
for tag, maker in [("fvi", prep_fvi),
                   ("poly1", lambda s: prep_avi("poly", s, degree=1)),
                   ("mlp16", lambda s: prep_avi("mlp", s, width=16))]:
    for seed in range(3):
        st = run(maker(seed), seed + {"fvi": 0, "poly1": 100, "mlp16": 200}[tag])
        e = al.elbo_estimate(m, st, data, eval_noise).value
        rows.append((tag, seed, e))
        print(f"{tag} seed {seed}: {e:.1f}  [{time.time()-t0:.1f}s]", flush=True)

for tag in ("fvi", "poly1", "mlp16"):
    vals = [e for t, s, e in rows if t == tag]
    print(tag, "median", float(np.median(vals)))
