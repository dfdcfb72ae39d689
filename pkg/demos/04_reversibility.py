"""When does the two-type competition chain admit a reversible measure?

Unit-square circuits decide it on a box; for the competition model the answer
also has a closed form in the coefficients.
"""

import numpy as np

from qsdlab.reversibility import (case2_closed_form_check, case2_rates, circuit_criterion,
                                  construct_reversible_measure)

cases = {
    "symmetric": (1, 1, 1, 1, [[1, 1], [1, 1]]),
    "c12 doubled": (1, 1, 1, 1, [[1, 2], [1, 1]]),
    "balanced asymmetry": (1, 1, 2, 1, [[2, 2], [1, 1]]),
}
for name, (l1, l2, m1, m2, c) in cases.items():
    rates = case2_rates(l1, l2, m1, m2, c)
    rep = circuit_criterion(rates, (10, 10))
    closed = case2_closed_form_check(l1, l2, m1, m2, c)
    print(f"{name:>20}: circuits say reversible={rep.reversible} "
          f"(worst |log product| {rep.worst_log_deviation:.2e} at {rep.worst_plaquette}); "
          f"closed form {closed['reversible']} {closed['violated']}")
    if rep.reversible:
        pi = construct_reversible_measure(rates, (10, 10))
        X, w = pi.states()
        top = X[np.argmax(w)]
        print(f"{'':>22}log pi built along axis paths, edge error {pi.max_edge_error:.1e}, "
              f"mode at {tuple(int(v) for v in top)}")
