"""
Brownian motion with a small random drift
=========================================

For drift of size eps the slab of half-width L = floor(1/(4 eps)) is the
natural scale.  The right-exit probability of one slab step is
(x1 + L + G b1(x)) / 2L, where G b1 is the expected drift accumulated
before exit.  Aligned drift pushes the odds below one.
"""
from rediff.ballistic_example import (ExampleParams, delta_condition, phat_formula_vs_mc,
                                      rhohat_estimate)
from rediff.env import EnvSpec, sample_environment

eps = 0.04
params = ExampleParams(eps, d=2)
print(params.as_dict())

# %%
# Formula against direct simulation in a few environments.
spec = EnvSpec(d=2, eps=eps, lam=eps / 2)
for s in range(3):
    env = sample_environment(spec, s)
    r = phat_formula_vs_mc(env, [0.0, 0.0], params.L, 3000, 0.036, seed=s)
    print(f"env {s}: MC {r['mc'].mean:.4f}, formula {r['formula'].mean:.4f}, "
          f"gap/sigma {r['gap'] / r['combined_stderr']:+.2f}")

# %%
# The worst-case odds over the entry region, averaged over environments.
eps = 1 / 80
big = ExampleParams(eps, d=2)
for lam in (0.0, eps / 2, eps):
    est = rhohat_estimate(EnvSpec(d=2, eps=eps, lam=lam), big, 10, 100, dt=0.4, seed=3, refine=False)
    print(f"L = {big.L}, lam = {lam:.4f}: mean odds {est.mean:.3f} +- {est.stderr:.3f}")

# %%
# The concentration condition needs many slabs per box.
for N in (4, 100, 1000, None):
    p = ExampleParams(0.01, N=N)
    val, ok, _ = delta_condition(p)
    print(f"N = {p.n_slabs:>6}: delta^-1 = {val:.4g}, passes = {ok}")
