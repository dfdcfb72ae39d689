import numpy as np
import pytest

from qsdlab.model import builtin_competition_model, load_fixture
from qsdlab.ode import integrate, kurtz_deviation


@pytest.fixture(scope="module")
def comp():
    return builtin_competition_model(2.0, 1.0, 1.0, 2)


def logistic_exact(x0, t, r=1.0, c=1.0):
    # x' = r x - c x^2, solved by separation of variables
    return r * x0 * np.exp(r * t) / (r + c * x0 * (np.exp(r * t) - 1.0))


def test_fixed_point_is_stationary(comp):
    fl = integrate(comp, [1.5, 1.5], 10.0)
    assert np.max(np.abs(fl.points - 1.5)) <= 1e-12


def test_converges_to_fixed_point(comp):
    fl = integrate(comp, [0.1, 0.1], 50.0)
    assert np.linalg.norm(fl.points[-1] - 1.5) <= 1e-6


def test_logistic_closed_form():
    m = load_fixture("logistic")  # B = 2x, D = x(1 + x): x' = x - x^2
    t = np.linspace(0, 20, 401)
    fl = integrate(m, [2.0], 20.0, t_eval=t)
    assert np.max(np.abs(fl.points[:, 0] - logistic_exact(2.0, t))) <= 1e-7


def test_distance_to_fixed_point_non_increasing(comp):
    rng = np.random.default_rng(3)
    for _ in range(5):
        x0 = rng.uniform(0.05, 4.0, size=2)
        fl = integrate(comp, x0, 20.0, n_out=2001)
        dist = np.linalg.norm(fl.points - 1.5, axis=1)
        assert np.all(np.diff(dist) <= 1e-9)


def test_tolerance_halving(comp):
    a = integrate(comp, [0.2, 3.0], 5.0, rel_tol=1e-8, abs_tol=1e-10).points[-1]
    b = integrate(comp, [0.2, 3.0], 5.0, rel_tol=5e-9, abs_tol=5e-11).points[-1]
    assert np.max(np.abs(a - b)) <= 10 * 5e-9


def test_dense_output_callable(comp):
    fl = integrate(comp, [0.1, 0.1], 5.0)
    assert fl([2.5]).shape == (1, 2)
    assert fl.stats["clipped"] is False


def test_kurtz_impossible_event(comp):
    r = kurtz_deviation(comp, 20, [1.5, 1.5], 5.0, 10.0, 200, 1)
    assert r.freq == 0.0
    assert r.ci_low == 0.0 and r.ci_high > 0


def test_kurtz_empty(comp):
    r = kurtz_deviation(comp, 20, [1.5, 1.5], 5.0, 0.2, 0, 1)
    assert r.freq is None and r.replicas == 0


def test_kurtz_sup_matches_manual_path(comp):
    from qsdlab.sim import simulate

    # same (seed, stream) gives the same path in both kernels
    K, t_bar = 40, 2.0
    r = kurtz_deviation(comp, K, [0.5, 2.0], t_bar, 0.2, 1, 77)
    tr = simulate(comp, K, [20, 80], t_bar, 77, stream=0)
    fl = integrate(comp, [0.5, 2.0], t_bar)
    grid = np.linspace(0, t_bar, 2049)
    times = np.concatenate([tr.times, tr.times[1:], grid])
    states = np.concatenate([tr.states, tr.states[:-1],
                             np.array([tr.state_at(t) for t in grid])])
    manual = np.abs(states / K - fl(times)).sum(axis=1).max()
    assert r.sups[0] == pytest.approx(manual, abs=1e-7)


def test_kurtz_sup_shrinks_with_k(comp):
    med = [np.median(kurtz_deviation(comp, K, [1.5, 1.5], 5.0, 0.2, 100, 2).sups)
           for K in (20, 80, 320)]
    assert med[0] > med[1] > med[2]
