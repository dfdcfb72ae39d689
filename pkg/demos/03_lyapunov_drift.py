"""Certify the quadratic-exponential Lyapunov drift on a finite ball, then use
it to bound the probability of reaching the inner domain before escaping."""

import math

from qsdlab.lyapunov import (FourDomains, annulus_constants, four_domains_constants,
                             log_phi_factory, select_alpha)
from qsdlab.model import (builtin_competition_model, check_hypotheses, default_audit_spec,
                          lattice_fixed_point)
from qsdlab.sim import four_domains_validation

model = builtin_competition_model(2.0, 1.0, 1.0, 2)
spec = default_audit_spec(model)
audit = check_hypotheses(model, spec)
for name, (verdict, value) in audit.summary().items():
    print(f"{name}: {verdict:<5} {float(value):.4g}")

K = 30
sel = select_alpha(model, K, audit.beta, spec.R)
rep = sel.report
print(f"\nlargest passing alpha = {sel.alpha}, rho = {sel.rho}, norm floor = {sel.c_floor}")
print(f"scanned {rep.n_states} states (exhaustive={rep.exhaustive}); fitted C = {rep.C:.4f}")
print(f"worst state in the negative-drift region: {rep.worst_state}, margin {rep.worst_margin:.3f}")

ns = lattice_fixed_point(model, K)
r1 = 3 * math.sqrt(K)
dom = FourDomains(tuple(int(v) for v in ns), (r1, r1 + 4, 40.0, 44.0))
log_psi = log_phi_factory(ns, K, sel.alpha)
const = annulus_constants(model, K, dom, log_psi)
fd = four_domains_constants(const.log_a0, const.log_a1_prime, const.log_a2_dprime,
                            const.Lambda, logs=True)
print(f"\nLambda = {const.Lambda:.4f}, t_D1 = {fd.t_D1:.3f}, eta_D1 = {fd.eta_D1:.4f} "
      f"(clause {fd.clause})")
v = four_domains_validation(model, K, dom, log_psi, fd.t_D1, 2000, seed=10)
print(f"simulated P(reach D1 by t_D1 before leaving D-1) = {v.success:.4f}; "
      f"guaranteed >= {1 - fd.eta_D1:.4f}")
