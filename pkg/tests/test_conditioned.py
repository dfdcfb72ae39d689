import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import eig, expm

from qsdlab.conditioned import (Law, NoSurvivorsError, check_A1_A2, conditioned_law_mc,
                                extinction_law_test, fleming_viot_qsd, mixture_law,
                                mixture_residual, tv_convergence_curve, tv_distance)
from qsdlab.model import builtin_competition_model, load_fixture, model_from_dict
from qsdlab.spectral import build_killed_generator, default_box, solve_qsd

from oracles import conditioned_law, dense_qsd

R2 = math.sqrt(2)


@pytest.fixture(scope="module")
def two():
    m = load_fixture("two_state")
    gen = build_killed_generator(m, 1, (2,))
    return m, solve_qsd(gen), gen.Q.toarray()


@pytest.fixture(scope="module")
def logi():
    m = load_fixture("logistic")
    return m, solve_qsd(build_killed_generator(m, 4, default_box(m, 4)))


@pytest.fixture(scope="module")
def comp():
    return builtin_competition_model(2.0, 1.0, 1.0, 2)


def law1d(mass):
    return Law(np.arange(1, len(mass) + 1)[:, None], np.asarray(mass, float))


# --------------------------------------------------------------------------
# total variation

def test_tv_examples():
    p = law1d([0.5, 0.5])
    assert tv_distance(p, p).tv == 0.0
    assert tv_distance(Law.point([1]), Law.point([2])).tv == 1.0
    assert tv_distance(p, law1d([0.25, 0.75])).tv == pytest.approx(0.25, abs=1e-15)


def test_law_rejects_bad_mass():
    with pytest.raises(ValueError):
        law1d([0.5, 0.6])
    with pytest.raises(ValueError):
        law1d([1.5, -0.5])


def _rand_law(draw_w, draw_s):
    w = np.asarray(draw_w, float) + 1e-3
    s = np.asarray(draw_s)[: w.size]
    s, idx = np.unique(s, return_index=True)
    w = w[idx]
    return Law(np.column_stack([s, s % 3]), w / w.sum())


weights = st.lists(st.floats(0, 1), min_size=1, max_size=6)
sites = st.lists(st.integers(0, 8), min_size=6, max_size=6)


@settings(max_examples=100, deadline=None)
@given(weights, sites, weights, sites, weights, sites)
def test_tv_metric_axioms(w1, s1, w2, s2, w3, s3):
    p, q, r = _rand_law(w1, s1), _rand_law(w2, s2), _rand_law(w3, s3)
    pq, qp = tv_distance(p, q).tv, tv_distance(q, p).tv
    assert 0.0 <= pq <= 1.0
    assert pq == qp
    assert tv_distance(p, p).tv == 0.0
    assert pq <= tv_distance(p, r).tv + tv_distance(r, q).tv + 1e-12


def test_empirical_tv_carries_error_bars():
    emp = Law.from_samples(np.array([[1], [1], [2], [2]]))
    r = tv_distance(emp, law1d([0.5, 0.5]))
    assert r.tv == 0.0 and r.stderr > 0
    assert r.bias_bound == pytest.approx(0.5 * math.sqrt(2 / 4))


# --------------------------------------------------------------------------
# conditioned laws

def test_t_zero_returns_init(comp):
    law = conditioned_law_mc(comp, 10, [4, 7], 0.0, 50, 1)
    assert law.support.tolist() == [[4, 7]] and law.mass.tolist() == [1.0]
    with pytest.raises(ValueError):
        conditioned_law_mc(comp, 10, [4, 7], -1.0, 50, 1)


def test_two_state_long_time_close_to_nu(two):
    m, sol, _ = two
    law = conditioned_law_mc(m, 1, [1], 8.0, 10**6, 2)
    assert tv_distance(law, Law.from_qsd(sol)).tv <= 0.02


def test_two_state_matches_matrix_exponential(two):
    m, sol, Q = two
    for t in (0.5, 1.0, 2.0, 4.0):
        law = conditioned_law_mc(m, 1, [1], t, 200_000, 7)
        exact, surv = conditioned_law(Q, [1.0, 0.0], t)
        n = law.sample_size
        p1 = law.mass_of([1])
        assert abs(p1 - exact[0]) <= 3 * math.sqrt(exact[0] * exact[1] / n)
        f = law.info["survivor_fraction"]
        assert abs(f - surv) <= 3 * math.sqrt(surv * (1 - surv) / 200_000)


@pytest.mark.parametrize("which", ["two", "logi"])
def test_qsd_invariance_and_survival(which, request):
    fx = request.getfixturevalue(which)
    m, sol = fx[0], fx[1]
    K = 1 if which == "two" else 4
    nu = Law.from_qsd(sol)
    for t in (1.0, 5.0, 10.0):
        N = 400_000 if which == "two" else 100_000
        law = conditioned_law_mc(m, K, nu, t, N, 11 + int(t))
        r = tv_distance(law, nu)
        assert r.tv <= 3 * r.stderr
        f = law.info["survivor_fraction"]
        s = math.exp(-sol.lambda0 * t)
        assert abs(f - s) <= 3 * math.sqrt(s * (1 - s) / N)


def test_no_survivors_error():
    m = load_fixture("pure_death")
    with pytest.raises(NoSurvivorsError, match="smaller t or more replicas"):
        conditioned_law_mc(m, 1, [1], 50.0, 10, 0)


def test_curve_at_zero_from_qsd(two):
    m, sol, _ = two
    nu = Law.from_qsd(sol)
    c = tv_convergence_curve(m, 1, nu, [0.0], 100_000, 3, nu)
    assert c.tv[0] <= 3 * c.stderr[0]


def test_curve_matches_exact_two_state(two):
    m, sol, Q = two
    nu = Law.from_qsd(sol)
    t_grid = [0.25, 0.5, 1.0, 2.0]
    c = tv_convergence_curve(m, 1, [1], t_grid, 200_000, 5, nu)
    for t, tv, se in zip(t_grid, c.tv, c.stderr):
        exact, _ = conditioned_law(Q, [1.0, 0.0], t)
        assert abs(tv - 0.5 * np.abs(exact - sol.nu).sum()) <= 3 * se
    assert c.decreasing and c.decay_rate > 0


# --------------------------------------------------------------------------
# mixture

def test_mixture_at_time_zero_is_arithmetic(two):
    _, sol, _ = two
    p = min(sol.u_at([1]), 1.0)
    mix = mixture_law(sol, [1], 0.0)
    # delta_1 against p nu + (1 - p) delta_0
    expected = 0.5 * (abs(1 - p * sol.nu[0]) + p * sol.nu[1] + (1 - p))
    assert tv_distance(Law.point([1]), mix).tv == pytest.approx(expected, abs=1e-14)


def test_mixture_exact_two_state_within_two_term_bound(two):
    _, sol, Q = two
    lam, nu, u, w = dense_qsd(Q)
    vals, vl, vr = eig(Q, left=True, right=True)
    k = int(np.argmin(vals.real))
    lam1 = -vals[k].real
    nu1 = vl[:, k].real / (vl[:, k].real @ vr[:, k].real)
    u1 = vr[:, k].real
    t = 4.0
    alive = np.array([1.0, 0.0]) @ expm(t * Q)
    exact = Law(np.array([[0], [1], [2]]), np.r_[1 - alive.sum(), alive])
    res = tv_distance(exact, mixture_law(sol, [1], t)).tv
    p = min(u[0], 1.0)
    bound = math.exp(-lam * t) * abs(u[0] - p) + math.exp(-lam1 * t) * abs(u1[0]) * np.abs(nu1).sum()
    assert res <= bound + 1e-14


def test_mixture_outside_box(two):
    _, sol, _ = two
    with pytest.raises(ValueError, match="outside"):
        mixture_law(sol, [5], 1.0)


def test_mixture_long_time_tends_to_dirac_at_zero(two):
    m, sol, _ = two
    r = mixture_residual(m, 1, [1], 60.0, sol, 5000, 9)
    assert r.tv <= 1e-12


# --------------------------------------------------------------------------
# extinction law

def test_two_state_extinction_mean(two):
    m, sol, _ = two
    r = extinction_law_test(m, 1, sol, 100_000, 4)
    assert r.expected_mean == pytest.approx((2 + R2) / 2, rel=1e-9)
    assert abs(r.z) <= 3
    assert r.censored_fraction == 0.0


def test_fast_scalar_extinction():
    m = model_from_dict({"d": 1, "birth": [[]], "death": [[{"coeff": "10", "exps": [1]}]]})
    sol = solve_qsd(build_killed_generator(m, 1, (1,)))
    assert sol.lambda0 == 10.0
    r = extinction_law_test(m, 1, sol, 20_000, 5)
    assert abs(r.mean - 0.1) <= 3 * r.stderr


def test_competition_k6_ks(comp):
    sol = solve_qsd(build_killed_generator(comp, 6, default_box(comp, 6)))
    r = extinction_law_test(comp, 6, sol, 200, 3)
    assert r.ks_pvalue >= 0.01


def test_censoring_notice(two):
    m, sol, _ = two
    with pytest.warns(UserWarning, match="enlarge t_max"):
        r = extinction_law_test(m, 1, sol, 2000, 1, t_max=0.5)
    assert r.censored_fraction > 0.001


# --------------------------------------------------------------------------
# (A1)/(A2)

def test_a1_two_state_positive(two):
    m, sol, _ = two
    rep = check_A1_A2(m, 1, sol, 2.0, 20_000, 1, delta_states=[[1], [2]], probes=[(1,), (2,)])
    assert rep.c1_hat > 0 and rep.c2_hat > 0


def test_a1_time_zero_single_probe(two):
    m, sol, _ = two
    rep = check_A1_A2(m, 1, sol, 0.0, 100, 1, delta_states=[[1], [2]], probes=[(1,)])
    assert rep.c1_hat == 0.0


def test_a1_a2_competition_k8(comp):
    K = 8
    sol = solve_qsd(build_killed_generator(comp, K, (40, 40)))
    rep = check_A1_A2(comp, K, sol, 1 + math.log(K), 2000, 2)
    assert rep.c1_hat > 0 and rep.c2_hat > 0
    assert not rep.dropped


# --------------------------------------------------------------------------
# Fleming-Viot

def test_fleming_viot_two_state(two):
    m, sol, _ = two
    fv = fleming_viot_qsd(m, 1, 1024, 200.0, 1)
    assert tv_distance(fv, Law.from_qsd(sol)).tv <= 0.03
    assert fv.info["restarts"] == 0


def test_fleming_viot_single_state():
    m = model_from_dict({"d": 1, "birth": [[]], "death": [[{"coeff": "1", "exps": [1]}]]})
    fv = fleming_viot_qsd(m, 1, 2, 20.0, 1, init=[[1], [1]])
    assert fv.support.tolist() == [[1]] and fv.mass.tolist() == [1.0]


def test_fleming_viot_competition_k12(comp):
    sol = solve_qsd(build_killed_generator(comp, 12, default_box(comp, 12)))
    fv = fleming_viot_qsd(comp, 12, 300, 100.0, 2)
    assert tv_distance(fv, Law.from_qsd(sol)).tv <= 0.05


def test_fleming_viot_needs_two():
    with pytest.raises(ValueError):
        fleming_viot_qsd(load_fixture("two_state"), 1, 1, 10.0, 0)
