import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstest

from qsdlab import _kernels as kern
from qsdlab.io import read_csv
from qsdlab.model import builtin_competition_model, lattice_fixed_point, load_fixture
from qsdlab.sim import (Ball, Never, Origin, Outside, StateSet, decode_states, delta_region,
                        descent_time_experiment, encode_states, first_jump_sample, hitting_batch,
                        hitting_time, km_mean, simulate, snapshot_batch)

from oracles import pure_death_mean


@pytest.fixture(scope="module")
def comp():
    return builtin_competition_model(2.0, 1.0, 1.0, 2)


@pytest.fixture(scope="module")
def death():
    return load_fixture("pure_death")


def test_origin_start_is_absorbed(comp):
    tr = simulate(comp, 10, [0, 0], 5.0, 1)
    assert tr.times.tolist() == [0.0]
    assert tr.terminal_reason == "absorbed"


def test_pure_death_single_step_mean(death):
    b = hitting_batch(death, 1.0, [1], Origin(), 1e6, 100_000, 3)
    assert np.all(b.event == kern.HIT_A)
    assert abs(b.time.mean() - 1.0) <= 0.02


def test_pure_death_from_three(death):
    b = hitting_batch(death, 1.0, [3], Origin(), 1e6, 100_000, 4)
    se = b.time.std() / math.sqrt(b.replicas)
    assert abs(b.time.mean() - pure_death_mean(3)) <= 4 * se


def test_target_containing_start(comp):
    assert hitting_time(comp, 10, [5, 5], Ball((5, 5), 0.0), 10.0, 1) == (0.0, False)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(1, 12))
def test_paths_are_nearest_neighbour(seed, K):
    m = builtin_competition_model(2.0, 1.0, 1.0, 2)
    n0 = lattice_fixed_point(m, K) + 1
    tr = simulate(m, K, n0, 3.0, seed)
    assert np.all(np.diff(tr.times) > 0)
    steps = np.abs(np.diff(tr.states, axis=0)).sum(axis=1)
    assert np.all(steps == 1)
    assert np.all(tr.states >= 0)
    if tr.terminal_reason == "absorbed":
        assert not tr.states[-1].any()


def test_trajectory_csv_deterministic(comp, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    simulate(comp, 20, [30, 30], 2.0, 99).to_csv(a)
    simulate(comp, 20, [30, 30], 2.0, 99).to_csv(b)
    assert a.read_bytes() == b.read_bytes()
    header, rows = read_csv(a)
    assert header == ["t", "n_1", "n_2"]
    assert rows[0] == [0.0, 30.0, 30.0]


def test_batch_csv_header(comp, tmp_path):
    b = hitting_batch(comp, 10, [15, 15], Origin(), 1.0, 5, 1)
    p = tmp_path / "b.csv"
    b.to_csv(p)
    header, rows = read_csv(p)
    assert header == ["replica", "seed", "K", "event", "time", "censored"]
    assert len(rows) == 5 and all(r[3] == "censored" for r in rows)


def test_sojourn_time_is_exponential(comp):
    n = np.array([7, 3])
    K = 5.0
    b, dth = comp.rates(n[None, :], K)
    total = float(b.sum() + dth.sum())
    hold, ev = first_jump_sample(comp, K, n, 100_000, 11)
    assert kstest(hold, "expon", args=(0, 1 / total)).pvalue > 1e-3
    p = np.concatenate([b[0], dth[0]]) / total
    counts = np.bincount(ev, minlength=4)
    se = np.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) <= 3 * se)


def _lna_covariance(m, x_star):
    """Stationary covariance of ``(N - n*) / sqrt(K)`` in the linear-noise approximation."""
    from scipy.linalg import solve_continuous_lyapunov

    A = m.drift_jacobian(x_star)
    G = np.diag(m.birth(x_star) + m.death(x_star))
    return solve_continuous_lyapunov(A, -G)


def test_fluctuations_match_linear_noise(comp):
    K = 50
    ns = lattice_fixed_point(comp, K)
    st_, _ = snapshot_batch(comp, K, ns, np.linspace(2.0, 10.0, 5), 10.0, 4000, 21)
    z = (st_.reshape(-1, 2) - ns) / math.sqrt(K)
    emp = np.cov(z.T)
    lna = _lna_covariance(comp, np.array([1.5, 1.5]))
    np.testing.assert_allclose(emp, lna, rtol=0.15, atol=0.1)


@pytest.mark.xfail(strict=True, reason="stated 99% confinement to ||n-n*|| <= K/2 over t <= 10 "
                   "contradicts the linear-noise covariance (per-axis sd ~ 13 vs radius 25)")
def test_concentration_near_fixed_point(comp):
    K = 50
    ns = lattice_fixed_point(comp, K)
    b = hitting_batch(comp, K, ns, Never(), 10.0, 1000, 5, avoid=Outside(tuple(ns), 0.5 * K))
    assert np.mean(b.event == kern.HIT_B) <= 0.01


def test_descent_k100_mostly_hits(comp):
    K = 100
    ns = lattice_fixed_point(comp, K)
    b = hitting_batch(comp, K, 3 * ns, delta_region(ns, K, 1.0), 100.0, 500, 6)
    assert np.mean(b.event == kern.HIT_A) >= 0.99
    assert np.all(b.time[b.event == kern.HIT_A] < 100.0)


def test_descent_degenerate_cases(comp):
    r = descent_time_experiment(comp, [50], n0_rule=lattice_fixed_point(comp, 50), replicas=20)
    assert np.all(r.samples[50] == 0.0)
    assert r.slope is None


def test_small_k_goes_extinct(comp):
    for K in (1, 2):
        b = hitting_batch(comp, K, lattice_fixed_point(comp, K), Origin(), 1e4, 200, K)
        assert np.mean(b.event == kern.HIT_A) == 1.0


def test_state_set_region(comp):
    s = StateSet([[3, 4], [1, 1]])
    assert s.contains([1, 1]) and not s.contains([1, 2])
    assert hitting_time(comp, 10, [1, 1], s, 1.0, 0)[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1)), min_size=1, max_size=20))
def test_encode_decode_round_trip(states):
    X = np.array(states, dtype=np.int64)
    assert np.array_equal(decode_states(encode_states(X, 2), 2), X)


def test_km_mean_no_censoring_equals_sample_mean():
    t = np.array([0.5, 1.0, 2.0, 4.0])
    assert km_mean(t, np.zeros(4, bool), 10.0) == pytest.approx(t.mean())
    assert km_mean(t, np.ones(4, bool), 10.0) == 10.0
