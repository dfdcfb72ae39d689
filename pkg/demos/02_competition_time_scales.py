"""Two competing types: fast relaxation, exponentially slow extinction.

Rates are K B(n/K) and K D(n/K) with B_j(x) = 2 (x_1 + x_2) and
D_j(x) = x_j (1 + x_1 + x_2); the deterministic flow has x* = (1.5, 1.5).
"""

import math

import numpy as np

from qsdlab.conditioned import Law, mixture_residual, tv_convergence_curve
from qsdlab.model import builtin_competition_model, find_fixed_point, lattice_fixed_point
from qsdlab.sim import descent_time_experiment
from qsdlab.spectral import build_killed_generator, default_box, lambda0_scaling, solve_qsd

model = builtin_competition_model(lam=2.0, mu=1.0, kappa=1.0, d=2)
print("fixed point:", find_fixed_point(model).x_star)

# 1. Extinction rate from exact eigen-solves on truncated boxes.
scan = lambda0_scaling(model, [3, 4, 5, 6, 7, 8])
for K, lam in zip(scan.Ks, scan.lambda0):
    print(f"K={K:>2}: lambda0 = {lam:.3e}, mean extinction time from nu = {1 / lam:.3e}")
print(f"log lambda0 ~ {scan.slope:.3f} K  (R2 = {scan.r2:.4f})")

# 2. Relaxation of the conditioned law: a few time units are enough at K=8,
#    while extinction takes ~1/lambda0 ~ 5e4.
K = 8
sol = solve_qsd(build_killed_generator(model, K, default_box(model, K)))
curve = tv_convergence_curve(model, K, [1, 0], [1, 2, 4], 100_000, 7, Law.from_qsd(sol))
for t, tv, se in zip(curve.t, curve.tv, curve.stderr):
    print(f"t={t:>3}: TV(conditioned law, nu) = {tv:.4f}  (noise ~ {se:.4f})")

# 3. Unconditioned law in between: a mixture of nu and the Dirac mass at 0.
r = mixture_residual(model, K, lattice_fixed_point(model, K), 3 * math.log(K), sol, 50_000, 8)
print(f"mixture residual at t = 3 log K: {r.tv:.4f} (noise ~ {r.stderr:.4f})")

# 4. Coming down from far above n* takes time of order log K.
desc = descent_time_experiment(model, [50, 100, 200, 400], replicas=100, seed=9)
for K in desc.Ks:
    print(f"K={K:>3}: mean time from 3n* into the ball around n* = {desc.means[K]:.3f}")
print(f"slope against log K = {desc.slope:.3f}, R2 = {desc.r2:.3f}")
