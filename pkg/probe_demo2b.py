import time
import numpy as np
import amortlab as al

m = al.make_model("nonlinear")
data, theta, z = m.simulate(1000, 55)
theta0 = float(np.mean(data.x)) - float(np.exp(-0.5))

st = al.AmortizedState.init(m, kind="poly", degree=1, seed=301)
vec = st.param_vector().copy()
vec[0] = theta0
vec[1] = -2.0
vec[-1] = -1.5
st = st.with_params(vec)

t0 = time.time()
for i, (lr, steps, s) in enumerate([(1e-3, 1200, 100), (3e-4, 800, 200), (1e-4, 400, 300)]):
    cfg = al.OptimizerConfig(lr=lr, max_steps=steps, s=s, seed=900 + i,
                             convergence_window=None)
    rec = al.fit(m, st, data, cfg)
    st = rec.final_state
    print(f"stage {i} done [{time.time()-t0:.0f}s]", flush=True)

eval_noise = al.NoiseBlock.from_seed([909_090], 400, m, data.n)
print("poly1 final:", al.elbo_estimate(m, st, data, eval_noise).value)
