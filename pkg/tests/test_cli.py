import io
import json
import math
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from qsdlab.cli import EXPERIMENTS, main, run, validate_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _errors(diags):
    return [d for d in diags if d.severity == "error"]


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    assert _errors(validate_config(path)) == []


def test_zero_k_is_range_violation():
    diags = validate_config({"experiment": "qsd-exact", "model": {"fixture": "two_state"}, "K": 0})
    assert any("range violation: K must be > 0" in d.message for d in _errors(diags))


def test_unknown_experiment_suggests():
    diags = validate_config({"experiment": "qsd-exat", "model": {"fixture": "two_state"}, "K": 1})
    msg = " ".join(d.message for d in _errors(diags))
    assert "qsd-exact" in msg
    assert all(e in msg for e in EXPERIMENTS)


def test_empty_replicas():
    cfg = {"experiment": "qsd-mc", "model": {"fixture": "two_state"}, "K": 1, "replicas": 0}
    assert any("empty replicas count" in d.message for d in _errors(validate_config(cfg)))


def test_unknown_key_is_warning_only():
    cfg = {"experiment": "ode", "model": {"fixture": "logistic"}, "K": 5, "colour": "red"}
    diags = validate_config(cfg)
    assert _errors(diags) == [] and any(d.field == "colour" for d in diags)


def test_missing_model_file(tmp_path):
    cfg = {"experiment": "ode", "model": {"file": "nope.json"}, "K": 5}
    assert _errors(validate_config(cfg, base_dir=tmp_path))


def test_qsd_exact_two_state(tmp_path):
    cfg = json.loads((CONFIGS / "two_state_qsd_exact.json").read_text())
    code, rep = run(cfg, out=tmp_path, stream=io.StringIO())
    assert code == 0
    assert rep["results"]["lambda0"]["value"] == pytest.approx(2 - math.sqrt(2), abs=1e-10)
    assert (tmp_path / "qsd.csv").exists() and (tmp_path / "report.json").exists()


def test_hypotheses_report(tmp_path):
    cfg = json.loads((CONFIGS / "competition_hypotheses.json").read_text())
    code, rep = run(cfg, out=tmp_path, stream=io.StringIO())
    assert code == 0
    entries = json.loads((tmp_path / "hypotheses.json").read_text())["entries"]
    assert set(entries) == {f"H{i}" for i in range(9)}


def test_audit_failure_exit_code(tmp_path):
    cfg = {"experiment": "qsd-exact", "K": 4,
           "model": {"d": 1, "birth": [[{"coeff": "2", "exps": [1]}]],
                     "death": [[{"coeff": "1", "exps": [1]}]]},
           "audit": {"R": 10, "L": 8}, "box": [20]}
    code, rep = run(cfg, out=tmp_path, stream=io.StringIO())
    assert code == 2
    assert (tmp_path / "hypotheses.json").exists()


def test_main_validate_only(capsys):
    assert main(["qsd-exact", "--config", str(CONFIGS / "two_state_qsd_exact.json"),
                 "--validate-only"]) == 0


def test_main_structured_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    # one iteration cannot reach the tolerance
    p.write_text(json.dumps({"experiment": "qsd-exact", "model": {"fixture": "two_state"}, "K": 1,
                             "box": [2], "skip_audit": True, "max_iter": 1, "tol": 1e-300}))
    code = main(["qsd-exact", "--config", str(p), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "QsdConvergenceError"


@pytest.mark.parametrize("name", ["competition_simulate", "two_state_tv_curve", "case2_reversible",
                                  "logistic_lambda0_scaling"])
def test_byte_identical_reruns(name, tmp_path):
    cfg = json.loads((CONFIGS / f"{name}.json").read_text())
    if "replicas" in cfg:
        cfg["replicas"] = min(cfg["replicas"], 2000)
    a, b = tmp_path / "a", tmp_path / "b"
    run(cfg, out=a, stream=io.StringIO())
    run(cfg, out=b, stream=io.StringIO())
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert csvs
    for f in csvs:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


# --------------------------------------------------------------------------
# fuzz: tiny configs must produce an exit code, never a traceback

FAST = ["simulate", "ode", "kurtz", "qsd-exact", "qsd-mc", "fleming-viot", "tv-curve", "mixture",
        "extinction-law", "lambda0-scaling", "descent-time", "drift-check", "hypotheses",
        "reversibility", "four-domains"]
models = st.sampled_from([{"fixture": "two_state"}, {"fixture": "logistic"},
                          {"fixture": "pure_death"},
                          {"builtin": "competition", "params": {"lambda": 2, "mu": 1, "kappa": 1, "d": 2}},
                          {"builtin": "logistic"}])
junk = st.one_of(st.integers(-3, 4), st.floats(-1, 4, allow_nan=False), st.just("x"), st.none())


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.sampled_from(FAST), models, st.integers(1, 4), st.integers(0, 10),
       st.dictionaries(st.sampled_from(["t_max", "t", "t_bar", "eps", "tol", "alpha", "rho"]), junk,
                       max_size=2))
def test_fuzz_no_uncaught_exceptions(tmp_path_factory, exp, model, K, reps, extra):
    cfg = {"experiment": exp, "model": model, "K": K, "Ks": [K, K + 1], "replicas": reps,
           "t_max": 1.0, "t": 0.5, "t_grid": [0.1, 0.2], "t_bar": 0.5, "eps": 0.5, "seed": 1,
           "skip_audit": True, "particles": max(reps, 2),
           "box": [6, 6] if model.get("builtin") == "competition" else [6]}
    if exp == "reversibility":
        cfg["case2"] = {"lam1": 1, "lam2": 1, "mu1": 1, "mu2": 1, "c": [[1, 1], [1, 1]]}
        cfg["box"] = [4, 4]
    cfg.update(extra)
    d = tmp_path_factory.mktemp("fz")
    p = d / "c.json"
    p.write_text(json.dumps(cfg))
    code = main([exp, "--config", str(p), "--out", str(d / "o")])
    assert code in (0, 1, 2)
