import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsdlab.model import builtin_logistic_model
from qsdlab.reversibility import (Rates, ReversibilityError, case2_closed_form_check, case2_rates,
                                  circuit_criterion, circuit_log_product,
                                  construct_reversible_measure, model_rates)

from oracles import case2_plaquette_product

ONES = [[1.0, 1.0], [1.0, 1.0]]
BOX = (8, 8)


def edge_errors(rates, meas):
    """Largest |log pi(n+e_j) - log pi(n) - log lam_j(n) + log mu_j(n+e_j)| over edges
    where both endpoints carry a weight and both rates are positive (plain loops)."""
    L = meas.log_pi
    worst = 0.0
    for n in np.ndindex(*L.shape):
        for j in range(len(n)):
            m = list(n)
            m[j] += 1
            m = tuple(m)
            if m[j] >= L.shape[j] or not (np.isfinite(L[n]) and np.isfinite(L[m])):
                continue
            lam = rates.lam(j, np.array([n]))[0]
            mu = rates.mu(j, np.array([m]))[0]
            if lam <= 0 or mu <= 0:
                continue
            rhs = math.log(lam) - math.log(mu)
            worst = max(worst, abs(L[m] - L[n] - rhs) / max(1.0, abs(rhs)))
    return worst


def test_one_dimension_always_reversible():
    r = circuit_criterion(model_rates(builtin_logistic_model(), 5), (30,))
    assert r.reversible and r.audited == 0


def test_symmetric_case2_reversible():
    rep = circuit_criterion(case2_rates(1, 1, 1, 1, ONES), BOX)
    assert rep.reversible and rep.worst_log_deviation <= 1e-12
    assert case2_closed_form_check(1, 1, 1, 1, ONES)["reversible"]


def test_asymmetric_case2_has_witness():
    c = [[1.0, 2.0], [1.0, 1.0]]
    rep = circuit_criterion(case2_rates(1, 1, 1, 1, c), BOX)
    assert not rep.reversible
    base, i, j = rep.worst_plaquette
    direct = math.log(case2_plaquette_product(1, 1, 1, 1, c, base))
    assert abs(direct) == pytest.approx(rep.worst_log_deviation, rel=1e-12)
    chk = case2_closed_form_check(1, 1, 1, 1, c)
    assert not chk["reversible"] and "c11=c12" in chk["violated"]


def test_third_equality_arithmetic():
    chk = case2_closed_form_check(1, 1, 2, 1, [[2.0, 2.0], [1.0, 1.0]])
    assert chk["reversible"] and chk["violated"] == []


def test_not_applicable_without_cross_terms():
    chk = case2_closed_form_check(1, 1, 1, 1, [[1.0, 0.0], [1.0, 1.0]])
    assert chk["applicable"] is False and chk["reversible"] is None


def test_plaquettes_skipped_on_axes():
    rep = circuit_criterion(case2_rates(1, 1, 1, 1, ONES), (4, 4))
    # bases with a zero coordinate need lam_j(n) with n_j = 0
    assert rep.audited == 3 * 3 and rep.skipped == 4 * 4 - 9
    assert all(0 in base for base, _, _ in rep.exclusions)


def test_one_dimensional_measure():
    rates = Rates(1, lambda j, X: np.ones(len(X)), lambda j, X: np.asarray(X, float)[:, 0], "bd")
    meas = construct_reversible_measure(rates, (12,))
    L = meas.log_pi
    assert math.isnan(L[0]) and L[1] == 0.0
    for n in range(1, 12):
        assert L[n + 1] - L[n] == pytest.approx(-math.log(n + 1), abs=1e-14)


def test_measure_on_reversible_case2(tmp_path):
    from qsdlab.io import read_csv

    rates = case2_rates(1, 1, 2, 1, [[2.0, 2.0], [1.0, 1.0]])
    a = construct_reversible_measure(rates, BOX)
    b = construct_reversible_measure(rates, BOX, axis_order=(1, 0))
    assert a.log_pi[1, 1] == 0.0
    fin = np.isfinite(a.log_pi)
    assert np.array_equal(fin, np.isfinite(b.log_pi))
    assert np.max(np.abs(a.log_pi[fin] - b.log_pi[fin])) <= 1e-10
    assert edge_errors(rates, a) <= 1e-12
    a.to_csv(tmp_path / "pi.csv")
    header, rows = read_csv(tmp_path / "pi.csv")
    assert header == ["n_1", "n_2", "log_pi"] and len(rows) == int(fin.sum())


def test_construction_refuses_nonreversible():
    with pytest.raises(ReversibilityError, match="axis-ordered path"):
        construct_reversible_measure(case2_rates(1, 1, 1, 1, [[1.0, 2.0], [1.0, 1.0]]), BOX)


# --------------------------------------------------------------------------
# circuits

def _closed_loop(start, moves):
    """Walk ``moves`` from ``start`` clamped to [1, 12]^2, then return along axis 0, axis 1."""
    p = [tuple(start)]
    cur = list(start)
    for j, s in moves:
        nxt = cur.copy()
        nxt[j] += s
        if 1 <= nxt[j] <= 12:
            cur = nxt
            p.append(tuple(cur))
    for j in (0, 1):
        while cur[j] != start[j]:
            cur[j] += 1 if start[j] > cur[j] else -1
            p.append(tuple(cur))
    return p


def _winding(path, a, b):
    """Winding number of a closed lattice loop about ``(a + 1/2, b + 1/2)``."""
    w = 0
    for (x0, y0), (x1, y1) in zip(path[:-1], path[1:]):
        if x0 == x1 and x0 >= a + 1 and min(y0, y1) == b:
            w += 1 if y1 > y0 else -1
    return w


move = st.tuples(st.integers(0, 1), st.sampled_from([-1, 1]))
cvals = st.sampled_from([0.5, 1.0, 2.0, 3.0])


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.integers(1, 12), st.integers(1, 12)), st.lists(move, min_size=2, max_size=40),
       cvals, cvals, cvals, cvals, st.sampled_from([0.5, 1.0, 2.0]))
def test_random_circuits_are_sums_of_plaquettes(start, moves, c11, c12, c21, c22, mu1):
    c = [[c11, c12], [c21, c22]]
    rates = case2_rates(1.5, 0.7, mu1, 1.0, c)
    path = _closed_loop(start, moves)
    total = circuit_log_product(rates, path)
    stokes = 0.0
    for a in range(1, 12):
        for b in range(1, 12):
            w = _winding(path, a, b)
            if w:
                stokes += w * math.log(case2_plaquette_product(1.5, 0.7, mu1, 1.0, c, (a, b)))
    assert total == pytest.approx(stokes, abs=1e-10)
    if case2_closed_form_check(1.5, 0.7, mu1, 1.0, c)["reversible"]:
        assert abs(total) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(cvals, cvals, cvals, cvals, st.sampled_from([0.5, 1.0, 2.0, 4.0]),
       st.sampled_from([0.5, 1.0, 2.0]))
def test_closed_form_agrees_with_circuits(c11, c12, c21, c22, mu1, mu2):
    c = [[c11, c12], [c21, c22]]
    rep = circuit_criterion(case2_rates(1.0, 2.0, mu1, mu2, c), (6, 6))
    assert rep.reversible == case2_closed_form_check(1.0, 2.0, mu1, mu2, c)["reversible"]
