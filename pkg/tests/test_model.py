import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsdlab.model import (AuditSpec, CallableModel, ModelError, RateField, Model,
                          builtin_competition_model, builtin_logistic_model, check_hypotheses,
                          competition_fixed_point, default_audit_spec, eval_rates,
                          find_fixed_point, lattice_fixed_point, load_fixture, model_from_dict)

from oracles import poly


@pytest.fixture(scope="module")
def comp():
    return builtin_competition_model(2.0, 1.0, 1.0, 2)


@pytest.fixture(scope="module")
def comp_audit(comp):
    return check_hypotheses(comp, default_audit_spec(comp))


def test_competition_fixed_point_closed_form(comp):
    fp = find_fixed_point(comp)
    assert fp.converged
    np.testing.assert_allclose(fp.x_star, [1.5, 1.5], atol=1e-12)
    np.testing.assert_allclose(competition_fixed_point(2, 1, 1, 2), [1.5, 1.5])
    assert np.max(np.abs(comp.drift(fp.x_star))) <= 1e-10


def test_builtin_domain_rejected():
    with pytest.raises(ModelError, match="lambda > mu/d"):
        builtin_competition_model(1.0, 1.0, 1.0, 1)


def test_builtin_birth_value():
    m = builtin_competition_model(1.0, 0.5, 2.0, 3)
    assert m.birth(np.array([1.0, 1.0, 1.0]))[0] == pytest.approx(3.0, abs=0)


def test_birth_totals_homogeneous(comp):
    rng = np.random.default_rng(0)
    for K in (1.0, 7.0, 50.0):
        X = rng.integers(0, 200, size=(500, 2))
        b, _ = comp.rates(X, K)
        np.testing.assert_allclose(b.sum(axis=1), K * 2 * 2.0 * X.sum(axis=1) / K, rtol=1e-14)


def test_rates_match_plain_polynomial(comp):
    x = np.array([0.3, 2.2])
    for j in range(2):
        terms = comp.birth.terms[j]
        ref = poly([(t.coeff, t.exps) for t in terms], x)
        assert comp.birth(x)[j] == pytest.approx(ref, rel=1e-14)


def test_origin_unstable(comp):
    ev = np.linalg.eigvals(comp.drift_jacobian(np.zeros(2)))
    assert np.max(ev.real) > 0


def test_jacobian_against_finite_differences(comp):
    x = np.array([0.7, 1.9])
    J = comp.drift_jacobian(x)
    h = 1e-6
    num = np.column_stack([(comp.drift(x + h * e) - comp.drift(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(J, num, atol=1e-7)


def test_eval_rates_errors(comp):
    with pytest.raises(ModelError):
        eval_rates(comp, [0, 1], 0)
    with pytest.raises(ModelError):
        eval_rates(comp, [-1, 1], 5)
    bad = model_from_dict({"d": 1, "birth": [[{"coeff": "-1", "exps": [1]}]],
                           "death": [[{"coeff": "1", "exps": [1]}]]})
    with pytest.raises(ModelError) as e:
        eval_rates(bad, [2], 1)
    assert e.value.witness == (2,)
    boundary = model_from_dict({"d": 1, "birth": [[]], "death": [[{"coeff": "1", "exps": [0]}]]})
    with pytest.raises(ModelError, match="empty coordinate"):
        eval_rates(boundary, [0], 1)


coeff = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coeff, st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=5))
def test_json_round_trip_bit_exact(terms):
    doc = {"d": 2, "name": "rt",
           "birth": [[{"coeff": repr(c), "exps": [a, b]} for c, a, b in terms], []],
           "death": [[], [{"coeff": repr(c), "exps": [a, b]} for c, a, b in terms]]}
    m = model_from_dict(doc)
    m2 = model_from_dict(json.loads(json.dumps(m.to_dict())))
    for f, g in ((m.birth, m2.birth), (m.death, m2.death)):
        for tf, tg in zip(f.terms, g.terms):
            assert [(t.coeff, tuple(t.exps)) for t in tf] == [(t.coeff, tuple(t.exps)) for t in tg]
    x = np.array([0.37, 1.21])
    assert np.array_equal(m.birth(x), m2.birth(x))


def test_fixtures_load():
    two = load_fixture("two_state")
    assert two.d == 1
    assert two.birth(np.array([1.0]))[0] == 1.0
    assert load_fixture("pure_death").birth(np.array([3.0]))[0] == 0.0


def test_lattice_fixed_point(comp):
    assert lattice_fixed_point(comp, 50).tolist() == [75, 75]


# --------------------------------------------------------------------------
# hypothesis audit

def test_audit_all_pass(comp_audit):
    assert comp_audit.passed, comp_audit.summary()
    assert set(comp_audit.entries) == {f"H{i}" for i in range(9)}
    assert comp_audit.beta > 0


def test_audit_h5_and_h8_margins(comp_audit):
    h5 = comp_audit.entries["H5"]
    assert h5.verdict == "pass"
    # ratio 4/(1+s) at s just beyond L=8 is 4/9; margin 1/2 - 4/9
    assert h5.margin == pytest.approx(0.5 - 4 / 9, abs=1e-2)
    assert comp_audit.entries["H8"].margin == pytest.approx(2.0)


def test_audit_linear_death_fails_h5():
    m = model_from_dict({"d": 1, "birth": [[{"coeff": "2", "exps": [1]}]],
                         "death": [[{"coeff": "1", "exps": [1]}]]})
    rep = check_hypotheses(m, AuditSpec(R=10, L=8))
    assert rep.entries["H5"].verdict == "fail"
    assert rep.entries["H5"].witness is not None


def test_audit_beta_positive_across_grids(comp):
    for res in (16, 32, 64):
        rep = check_hypotheses(comp, AuditSpec(R=10, L=8, resolution=res))
        assert rep.beta > 0


def test_callable_model_h8_inconclusive():
    m = CallableModel(1, lambda X: 2 * X, lambda X: X * (1 + X))
    rep = check_hypotheses(m, AuditSpec(R=6, L=4))
    assert rep.entries["H8"].verdict == "inconclusive"
    assert find_fixed_point(m).x_star[0] == pytest.approx(1.0, abs=1e-9)


def test_logistic_builtin():
    m = builtin_logistic_model()
    assert find_fixed_point(m).x_star[0] == pytest.approx(1.0)
    assert check_hypotheses(m, default_audit_spec(m)).passed
