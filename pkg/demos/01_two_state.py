"""The smallest killed chain: states {1, 2}, killing only from 1.

Everything here has a closed form, so this is the place to see what each
quantity means before trusting it on bigger models.
"""

import math

import numpy as np
from scipy.linalg import expm

from qsdlab.conditioned import Law, conditioned_law_mc, extinction_law_test, tv_distance
from qsdlab.model import load_fixture
from qsdlab.spectral import build_killed_generator, solve_qsd

model = load_fixture("two_state")
gen = build_killed_generator(model, K=1, box=(2,))
print("killed generator on {1, 2}:\n", gen.Q.toarray())

sol = solve_qsd(gen)
r2 = math.sqrt(2)
print(f"lambda0 = {sol.lambda0:.15f}   (2 - sqrt 2 = {2 - r2:.15f})")
print(f"nu      = {sol.nu}   (closed form {[r2 / (r2 + 1), 1 / (r2 + 1)]})")
print(f"u       = {sol.u}   normalised so that nu.u = {sol.nu @ sol.u:.3f}")

# Conditioned on survival, the law started at 1 forgets its start at rate
# lambda1 - lambda0 = 2 sqrt 2.  Compare Monte Carlo with exp(tQ).
Q = gen.Q.toarray()
nu = Law.from_qsd(sol)
print("\n  t    P(N=1 | alive) MC   exact     TV to nu")
for t in (0.25, 1.0, 3.0):
    mc = conditioned_law_mc(model, 1, [1], t, 200_000, seed=1)
    p = np.array([1.0, 0.0]) @ expm(t * Q)
    p /= p.sum()
    print(f"{t:5.2f}   {mc.mass_of([1]):.4f}            {p[0]:.4f}    {tv_distance(mc, nu).tv:.4f}")

# Started from nu, the extinction time is exactly exponential with rate lambda0.
ext = extinction_law_test(model, 1, sol, 100_000, seed=2)
print(f"\nmean T_0 from nu: {ext.mean:.4f} +- {ext.stderr:.4f}  vs 1/lambda0 = {1 / sol.lambda0:.4f}")
print(f"KS p-value against Exponential(lambda0): {ext.ks_pvalue:.3f}")
