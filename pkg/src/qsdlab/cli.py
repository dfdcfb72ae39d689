"""Command-line dispatcher: ``qsdlab <experiment> --config FILE``.

One experiment per invocation.  Every CSV carries the config hash in its
``#`` header; ``report.json`` holds results, checks, wall time and a
timestamp.  Exit status: 0 when every check passed, 2 when the hypothesis
audit fails (or a ``hypotheses`` run finds a failing entry), 1 on errors and
failed checks.
"""

from __future__ import annotations

import argparse
import difflib
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .io import sha256_of, write_csv, write_json

EXPERIMENTS = (
    "simulate", "ode", "kurtz", "qsd-exact", "qsd-mc", "fleming-viot", "tv-curve", "mixture",
    "extinction-law", "lambda0-scaling", "descent-time", "drift-check", "four-domains",
    "hypotheses", "reversibility",
)
MC_EXPERIMENTS = {"kurtz", "qsd-mc", "tv-curve", "mixture", "extinction-law", "descent-time",
                  "four-domains"}
FIXTURES = ("two_state", "logistic", "competition", "pure_death")
BUILTINS = ("competition", "logistic")
KNOWN_KEYS = {
    "experiment", "model", "K", "Ks", "seed", "replicas", "skip_audit", "audit", "n0", "x0",
    "t_max", "t", "t_grid", "t_bar", "eps", "box", "boundary_policy", "tol", "max_iter", "init",
    "particles", "rho", "alpha", "R_ball", "c_floor", "beta", "radii", "case2", "threshold",
    "r2_min", "rel_tol", "abs_tol", "n_out", "compare_exact", "grid", "gap", "start",
}


class ConfigError(ValueError):
    pass


@dataclass
class Diagnostic:
    severity: str  # "error" | "warning"
    field: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.field}: {self.message}"


# --------------------------------------------------------------------------
# validation

def _load(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None


def _positive(cfg, key, diags, integer=False):
    if key not in cfg:
        return
    v = cfg[key]
    vals = v if isinstance(v, list) else [v]
    if isinstance(v, list) and not v:
        diags.append(Diagnostic("error", key, "empty list"))
    for x in vals:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            diags.append(Diagnostic("error", key, f"expected a number, got {x!r}"))
        elif integer and int(x) != x:
            diags.append(Diagnostic("error", key, f"expected an integer, got {x!r}"))
        elif not x > 0:
            diags.append(Diagnostic("error", key, f"range violation: {key} must be > 0, got {x!r}"))


def _check_model_spec(spec, base_dir, diags):
    if spec is None:
        diags.append(Diagnostic("error", "model", "missing (fixture, file, builtin or inline)"))
        return
    if not isinstance(spec, dict):
        diags.append(Diagnostic("error", "model", "must be an object"))
        return
    if "fixture" in spec:
        if spec["fixture"] not in FIXTURES:
            sug = difflib.get_close_matches(str(spec["fixture"]), FIXTURES)
            diags.append(Diagnostic("error", "model.fixture",
                                    f"unknown fixture {spec['fixture']!r}; known: {', '.join(FIXTURES)}"
                                    + (f"; did you mean {sug[0]!r}?" if sug else "")))
    elif "file" in spec:
        p = Path(spec["file"])
        if not p.is_absolute():
            p = Path(base_dir) / p
        if not p.exists():
            diags.append(Diagnostic("error", "model.file", f"referenced file does not exist: {p}"))
    elif "builtin" in spec:
        if spec["builtin"] not in BUILTINS:
            diags.append(Diagnostic("error", "model.builtin",
                                    f"unknown builtin {spec['builtin']!r}; known: {', '.join(BUILTINS)}"))
    elif "d" in spec:
        from .model import model_from_dict

        try:
            model_from_dict(spec)
        except Exception as e:  # malformed inline tables
            diags.append(Diagnostic("error", "model", f"inline model does not parse: {e}"))
    else:
        diags.append(Diagnostic("error", "model", "needs one of fixture, file, builtin, d"))


def validate_config(path_or_cfg, experiment=None, base_dir=None) -> list:
    """Schema, range and file-existence checks; no computation."""
    diags = []
    if isinstance(path_or_cfg, dict):
        cfg = path_or_cfg
        base_dir = base_dir or "."
    else:
        try:
            cfg = _load(path_or_cfg)
        except ConfigError as e:
            return [Diagnostic("error", "config", str(e))]
        base_dir = base_dir or Path(path_or_cfg).parent
    if not isinstance(cfg, dict):
        return [Diagnostic("error", "config", "top level must be an object")]
    exp = experiment or cfg.get("experiment")
    if exp is None:
        diags.append(Diagnostic("error", "experiment", "no experiment id given"))
    elif exp not in EXPERIMENTS:
        sug = difflib.get_close_matches(str(exp), EXPERIMENTS, n=3, cutoff=0.4)
        diags.append(Diagnostic("error", "experiment",
                                f"unknown experiment id {exp!r}; "
                                + (f"did you mean: {', '.join(sug)}? " if sug else "")
                                + f"valid ids: {', '.join(EXPERIMENTS)}"))
    if experiment and cfg.get("experiment") not in (None, experiment):
        diags.append(Diagnostic("warning", "experiment",
                                f"config says {cfg['experiment']!r}, command line says {experiment!r}"))
    for k in cfg:
        if k not in KNOWN_KEYS:
            sug = difflib.get_close_matches(k, KNOWN_KEYS, n=1)
            diags.append(Diagnostic("warning", k, "unknown key" + (f"; did you mean {sug[0]!r}?" if sug else "")))
    if not (exp == "reversibility" and "case2" in cfg):
        _check_model_spec(cfg.get("model"), base_dir, diags)
    for key in ("K", "Ks", "t_max", "t_bar", "eps", "tol", "t", "rel_tol", "abs_tol", "rho",
                "R_ball", "c_floor", "beta", "particles"):
        _positive(cfg, key, diags)
    _positive(cfg, "max_iter", diags, integer=True)
    if "box" in cfg:
        b = cfg["box"]
        if not isinstance(b, list) or not b or any(not isinstance(v, int) or isinstance(v, bool) for v in b):
            diags.append(Diagnostic("error", "box", "must be a non-empty list of integers"))
        elif any(v < 1 for v in b):
            diags.append(Diagnostic("error", "box", f"range violation: every box bound must be >= 1, got {b}"))
    if "t_grid" in cfg:
        g = cfg["t_grid"]
        if not isinstance(g, list) or not g or any(not isinstance(v, (int, float)) or v < 0 for v in g):
            diags.append(Diagnostic("error", "t_grid", "must be a non-empty list of non-negative times"))
    if "alpha" in cfg and cfg["alpha"] != "auto":
        a = cfg["alpha"]
        if not isinstance(a, (int, float)) or not 0 < a < 0.5:
            diags.append(Diagnostic("error", "alpha", f"range violation: need 0 < alpha < 1/2 or 'auto', got {a!r}"))
    if "boundary_policy" in cfg and cfg["boundary_policy"] not in ("reflect", "kill"):
        diags.append(Diagnostic("error", "boundary_policy", "must be 'reflect' or 'kill'"))
    if exp in MC_EXPERIMENTS or (exp == "fleming-viot"):
        key = "particles" if exp == "fleming-viot" else "replicas"
        r = cfg.get(key)
        if r is None or r == [] or r == "" or r == 0:
            diags.append(Diagnostic("error", key, f"empty {key} count: a Monte-Carlo experiment needs {key} >= 1"))
        elif isinstance(r, bool) or not isinstance(r, int) or r < 1:
            diags.append(Diagnostic("error", key, f"range violation: {key} must be a positive integer, got {r!r}"))
        elif exp == "fleming-viot" and r < 2:
            diags.append(Diagnostic("error", key, "the particle system needs at least 2 particles"))
    if exp in ("lambda0-scaling", "descent-time") and "Ks" not in cfg:
        diags.append(Diagnostic("error", "Ks", f"{exp} needs a K list"))
    if exp not in (None, "ode", "hypotheses", "lambda0-scaling", "descent-time") and exp in EXPERIMENTS:
        if exp == "reversibility" and "case2" in cfg:
            pass
        elif exp == "kurtz" and "Ks" in cfg:
            pass
        elif "K" not in cfg:
            diags.append(Diagnostic("error", "K", f"{exp} needs K"))
    if "seed" in cfg and (isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or cfg["seed"] < 0):
        diags.append(Diagnostic("error", "seed", "must be a non-negative integer"))
    if "case2" in cfg:
        c2 = cfg["case2"]
        need = ("lam1", "lam2", "mu1", "mu2", "c")
        if not isinstance(c2, dict) or any(k not in c2 for k in need):
            diags.append(Diagnostic("error", "case2", f"needs keys {', '.join(need)}"))
        elif np.shape(c2["c"]) != (2, 2):
            diags.append(Diagnostic("error", "case2.c", "must be a 2x2 matrix"))
    return diags


# --------------------------------------------------------------------------
# model resolution

def resolve_model(spec, base_dir="."):
    from .model import (builtin_competition_model, builtin_logistic_model, load_fixture,
                        load_model, model_from_dict)

    if "fixture" in spec:
        return load_fixture(spec["fixture"])
    if "file" in spec:
        p = Path(spec["file"])
        return load_model(p if p.is_absolute() else Path(base_dir) / p)
    if "builtin" in spec:
        p = spec.get("params", {})
        if spec["builtin"] == "competition":
            return builtin_competition_model(p.get("lambda", 2.0), p.get("mu", 1.0),
                                             p.get("kappa", 1.0), int(p.get("d", 2)))
        return builtin_logistic_model(p.get("b", 2.0), p.get("mu", 1.0), p.get("c", 1.0))
    return model_from_dict(spec)


def audit_spec_from(cfg, model):
    from .model import AuditSpec, default_audit_spec

    a = cfg.get("audit")
    if not a:
        return default_audit_spec(model)
    base = default_audit_spec(model) if "R" not in a or "L" not in a else None
    return AuditSpec(R=float(a.get("R", base.R if base else 10.0)),
                     L=float(a.get("L", base.L if base else 8.0)),
                     resolution=int(a.get("resolution", 64)), s_max=a.get("s_max"),
                     s0=a.get("s0"), tol=float(a.get("tol", 1e-9)))


# --------------------------------------------------------------------------
# experiment context

class Context:
    def __init__(self, cfg, experiment, seed, out, base_dir):
        self.cfg = cfg
        self.experiment = experiment
        self.seed = int(seed)
        self.out = Path(out)
        self.base_dir = base_dir
        self.results = {}
        self.checks = {}
        self.files = []
        self.provenance = {}
        self.hash = sha256_of({"config": cfg, "experiment": experiment, "seed": self.seed,
                               "version": __version__})
        self._model = None
        self._audit = None

    @property
    def model(self):
        if self._model is None:
            self._model = resolve_model(self.cfg["model"], self.base_dir)
        return self._model

    def audit(self):
        if self._audit is None:
            from .model import check_hypotheses

            self._audit = check_hypotheses(self.model, audit_spec_from(self.cfg, self.model))
        return self._audit

    def meta(self):
        return {"experiment": self.experiment, "config_sha256": self.hash, "seed": self.seed,
                "qsdlab": __version__}

    def csv(self, name, header, rows):
        p = self.out / name
        write_csv(p, header, rows, self.meta())
        self.files.append(name)

    def save(self, name, obj):
        obj.to_csv(self.out / name, self.meta())
        self.files.append(name)

    def put(self, name, value, op):
        self.results[name] = {"value": value, "op": op}

    def check(self, name, ok, detail=""):
        self.checks[name] = {"passed": bool(ok), "detail": detail}

    def seeds(self, k):
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(k, dtype=np.uint64)]

    def K(self):
        return float(self.cfg["K"])

    def n_star(self, K):
        from .model import lattice_fixed_point

        return lattice_fixed_point(self.model, K)

    def qsd(self, K, stage="qsd"):
        from .spectral import build_killed_generator, default_box, solve_qsd

        box = self.cfg.get("box") or default_box(self.model, K)
        gen = build_killed_generator(self.model, K, box, self.cfg.get("boundary_policy", "reflect"))
        sol = solve_qsd(gen, float(self.cfg.get("tol", 1e-10)), int(self.cfg.get("max_iter", 1_000_000)))
        self.provenance[stage] = {"op": "qsdlab.spectral.solve_qsd", "box": [int(b) for b in gen.box],
                                  "states": gen.size, "policy": gen.boundary_policy}
        return sol


# --------------------------------------------------------------------------
# experiments

def exp_simulate(ctx):
    from .sim import simulate

    K = ctx.K()
    n0 = ctx.cfg.get("n0") or ctx.n_star(K).tolist()
    tr = simulate(ctx.model, K, n0, float(ctx.cfg.get("t_max", 10.0)), ctx.seed)
    ctx.save("trajectory.csv", tr)
    ctx.put("events", int(tr.times.size - 1), "qsdlab.sim.simulate")
    ctx.put("terminal_reason", tr.terminal_reason, "qsdlab.sim.simulate")
    ctx.put("final_state", tr.states[-1].tolist(), "qsdlab.sim.simulate")


def exp_ode(ctx):
    from .model import find_fixed_point
    from .ode import integrate

    d = ctx.model.d
    x0 = ctx.cfg.get("x0", [0.1] * d)
    fl = integrate(ctx.model, x0, float(ctx.cfg.get("t_max", 50.0)),
                   float(ctx.cfg.get("rel_tol", 1e-10)), float(ctx.cfg.get("abs_tol", 1e-12)),
                   n_out=int(ctx.cfg.get("n_out", 201)))
    ctx.save("flow.csv", fl)
    ctx.put("final_point", fl.points[-1].tolist(), "qsdlab.ode.integrate")
    ctx.put("clipped", fl.stats["clipped"], "qsdlab.ode.integrate")
    fp = find_fixed_point(ctx.model)
    if fp.converged:
        ctx.put("distance_to_fixed_point", float(np.linalg.norm(fl.points[-1] - fp.x_star)),
                "qsdlab.model.find_fixed_point")


def exp_kurtz(ctx):
    from .ode import kurtz_deviation

    Ks = ctx.cfg.get("Ks") or [ctx.cfg["K"]]
    x0 = ctx.cfg.get("x0")
    if x0 is None:
        from .model import find_fixed_point

        x0 = find_fixed_point(ctx.model).x_star.tolist()
    rows, reps = [], []
    for K, s in zip(Ks, ctx.seeds(len(Ks))):
        r = kurtz_deviation(ctx.model, float(K), x0, float(ctx.cfg.get("t_bar", 5.0)),
                            float(ctx.cfg.get("eps", 0.2)), int(ctx.cfg["replicas"]), s,
                            int(ctx.cfg.get("grid", 2048)))
        reps.append(r)
        rows.append([K, r.freq, r.ci_low, r.ci_high])
    ctx.csv("kurtz.csv", ["K", "freq", "ci_low", "ci_high"], rows)
    ctx.put("freq", [r.freq for r in reps], "qsdlab.ode.kurtz_deviation")
    if len(reps) >= 2:
        ok, detail = kurtz_trend(reps)
        ctx.check("decreasing_in_K", ok, detail)


def kurtz_trend(reps):
    """Each frequency must sit strictly below its predecessor plus 2 sigma of the
    difference, and the last strictly below the first."""
    f = np.array([r.freq for r in reps])
    se = np.array([math.sqrt(p * (1 - p) / r.replicas) for p, r in zip(f, reps)])
    steps = [bool(f[k + 1] < f[k] + 2 * math.hypot(se[k], se[k + 1])) for k in range(f.size - 1)]
    return all(steps) and bool(f[-1] < f[0]), f"freq={f.tolist()}, se={se.tolist()}"


def exp_qsd_exact(ctx):
    from .spectral import mean_extinction_from_qsd, spectral_gap_estimate

    K = ctx.K()
    sol = ctx.qsd(K)
    ctx.save("qsd.csv", sol)
    ctx.put("lambda0", sol.lambda0, "qsdlab.spectral.solve_qsd")
    ctx.put("lambda0_left", sol.lambda0_left, "qsdlab.spectral.solve_qsd")
    ctx.put("mean_extinction_time", mean_extinction_from_qsd(sol), "qsdlab.spectral.mean_extinction_from_qsd")
    ctx.put("residuals", list(sol.residuals), "qsdlab.spectral.solve_qsd")
    ctx.put("iterations", sol.iterations, "qsdlab.spectral.solve_qsd")
    tol = float(ctx.cfg.get("tol", 1e-10))
    ctx.check("converged", max(sol.residuals) <= tol, f"residuals={list(sol.residuals)}")
    if ctx.cfg.get("gap"):
        g = spectral_gap_estimate(sol.generator)
        ctx.put("gap", g.gap, "qsdlab.spectral.spectral_gap_estimate")


def _compare_exact(ctx, law, K, name):
    from .conditioned import Law, tv_distance

    if not ctx.cfg.get("compare_exact"):
        return
    sol = ctx.qsd(K)
    r = tv_distance(law, Law.from_qsd(sol), (name, "exact"))
    ctx.put("tv_to_exact", r.tv, "qsdlab.conditioned.tv_distance")
    ctx.put("tv_stderr", r.stderr, "qsdlab.conditioned.tv_distance")
    ctx.put("tv_bias_bound", r.bias_bound, "qsdlab.conditioned.tv_distance")


def _init(ctx, K):
    init = ctx.cfg.get("init")
    return ctx.n_star(K) if init is None else np.asarray(init, dtype=np.int64)


def exp_qsd_mc(ctx):
    from .conditioned import conditioned_law_mc

    K = ctx.K()
    law = conditioned_law_mc(ctx.model, K, _init(ctx, K), float(ctx.cfg.get("t", 10.0)),
                             int(ctx.cfg["replicas"]), ctx.seed)
    ctx.save("law.csv", law)
    ctx.put("survivor_fraction", law.info["survivor_fraction"], "qsdlab.conditioned.conditioned_law_mc")
    _compare_exact(ctx, law, K, "conditioned")


def exp_fleming_viot(ctx):
    from .conditioned import fleming_viot_qsd

    K = ctx.K()
    init = ctx.cfg.get("init")
    law = fleming_viot_qsd(ctx.model, K, int(ctx.cfg["particles"]), float(ctx.cfg.get("t_max", 50.0)),
                           ctx.seed, init=None if init is None else np.asarray(init, dtype=np.int64))
    ctx.save("law.csv", law)
    ctx.put("support_size", int(law.mass.size), "qsdlab.conditioned.fleming_viot_qsd")
    for k, v in law.info.items():
        if isinstance(v, (int, float)):
            ctx.put(k, v, "qsdlab.conditioned.fleming_viot_qsd")
    _compare_exact(ctx, law, K, "fleming_viot")


def exp_tv_curve(ctx):
    from .conditioned import Law, tv_convergence_curve

    K = ctx.K()
    sol = ctx.qsd(K)
    grid = ctx.cfg.get("t_grid", [1, 2, 4, 8])
    c = tv_convergence_curve(ctx.model, K, _init(ctx, K), grid, int(ctx.cfg["replicas"]), ctx.seed,
                             Law.from_qsd(sol))
    ctx.save("tv_curve.csv", c)
    ctx.put("tv", c.tv.tolist(), "qsdlab.conditioned.tv_convergence_curve")
    ctx.put("decay_rate", c.decay_rate, "qsdlab.conditioned.tv_convergence_curve")
    ctx.check("decreasing", bool(c.decreasing), f"tv={c.tv.tolist()}")
    if "threshold" in ctx.cfg:
        ctx.check("below_threshold_at_last_t", c.tv[-1] < float(ctx.cfg["threshold"]))


def exp_mixture(ctx):
    from .conditioned import mixture_residual

    K = ctx.K()
    sol = ctx.qsd(K)
    n0 = ctx.cfg.get("n0") or ctx.n_star(K).tolist()
    grid = ctx.cfg.get("t_grid", [3 * math.log(max(K, 2.0))])
    seeds = np.random.SeedSequence(ctx.seed).spawn(len(grid))
    rows = []
    for t, ss in zip(grid, seeds):
        r = mixture_residual(ctx.model, K, n0, float(t), sol, int(ctx.cfg["replicas"]), ss)
        rows.append([t, r.tv, r.stderr])
    ctx.csv("mixture.csv", ["t", "residual", "stderr"], rows)
    ctx.put("residual", [r[1] for r in rows], "qsdlab.conditioned.mixture_residual")
    thr = float(ctx.cfg.get("threshold", 0.05))
    ctx.check("residual_below_threshold", all(r[1] <= thr for r in rows), f"threshold={thr}")


def exp_extinction_law(ctx):
    from .conditioned import extinction_law_test

    K = ctx.K()
    sol = ctx.qsd(K)
    r = extinction_law_test(ctx.model, K, sol, int(ctx.cfg["replicas"]), ctx.seed,
                            ctx.cfg.get("t_max"))
    ctx.csv("extinction.csv", ["mean", "stderr", "expected_mean", "z", "ks_statistic", "ks_pvalue",
                               "censored_fraction"],
            [[r.mean, r.stderr, r.expected_mean, r.z, r.ks_statistic, r.ks_pvalue, r.censored_fraction]])
    for k in ("mean", "stderr", "expected_mean", "z", "ks_statistic", "ks_pvalue", "censored_fraction"):
        ctx.put(k, getattr(r, k), "qsdlab.conditioned.extinction_law_test")
    ctx.check("ks_at_1pct", r.ks_pvalue >= 0.01)
    ctx.check("mean_within_3se", abs(r.z) <= 3.0)


def exp_lambda0_scaling(ctx):
    from .spectral import lambda0_scaling

    box = ctx.cfg.get("box")
    res = lambda0_scaling(ctx.model, [float(k) for k in ctx.cfg["Ks"]],
                          (lambda K: box) if box else None,
                          ctx.cfg.get("boundary_policy", "reflect"), float(ctx.cfg.get("tol", 1e-10)),
                          int(ctx.cfg.get("max_iter", 1_000_000)))
    ctx.save("scaling.csv", res)
    ctx.put("lambda0", res.lambda0, "qsdlab.spectral.lambda0_scaling")
    ctx.put("slope", res.slope, "qsdlab.spectral.lambda0_scaling (linregress of log lambda0 on K)")
    ctx.put("r2", res.r2, "qsdlab.spectral.lambda0_scaling (linregress of log lambda0 on K)")
    ctx.provenance["slope"] = "least-squares fit of log lambda0 against K over Ks"
    if res.slope is not None:
        ctx.check("slope_negative", res.slope < 0)
        ctx.check("r2", res.r2 >= float(ctx.cfg.get("r2_min", 0.98)), f"r2={res.r2}")


def exp_descent_time(ctx):
    from .sim import descent_time_experiment

    Ks = [float(k) for k in ctx.cfg["Ks"]]
    r = descent_time_experiment(ctx.model, Ks, ctx.cfg.get("n0", "3x"), int(ctx.cfg.get("replicas", 200)),
                                ctx.seed, float(ctx.cfg.get("rho", 1.0)), float(ctx.cfg.get("t_max", 100.0)))
    ctx.csv("descent.csv", ["K", "log_K", "mean", "censor_rate"],
            [[K, math.log(K), r.means[K], r.censor_rate[K]] for K in Ks])
    ctx.put("means", [r.means[K] for K in Ks], "qsdlab.sim.descent_time_experiment")
    ctx.put("slope", r.slope, "qsdlab.sim.descent_time_experiment (linregress on log K)")
    ctx.put("r2", r.r2, "qsdlab.sim.descent_time_experiment (linregress on log K)")
    ctx.put("flagged_K", r.flagged, "qsdlab.sim.descent_time_experiment")
    ctx.provenance["slope"] = "least-squares fit of mean descent time against log K"
    if r.slope is not None:
        ctx.check("slope_positive", r.slope > 0)
        ctx.check("r2", r.r2 >= float(ctx.cfg.get("r2_min", 0.9)), f"r2={r.r2}")


def _beta_R(ctx):
    beta = ctx.cfg.get("beta")
    R = ctx.cfg.get("R_ball")
    if beta is None or R is None:
        rep = ctx.audit()
        beta = rep.beta if beta is None else beta
        R = rep.spec.R if R is None else R
        ctx.provenance["beta"] = "H3 grid estimate from qsdlab.model.check_hypotheses"
    return float(beta), float(R)


def exp_drift_check(ctx):
    from .lyapunov import select_alpha, verify_drift_bound

    K = ctx.K()
    beta, R = _beta_R(ctx)
    alpha = ctx.cfg.get("alpha", "auto")
    if alpha == "auto":
        sel = select_alpha(ctx.model, K, beta, R)
        rep = sel.report
        ctx.provenance["alpha"] = {"op": "qsdlab.lyapunov.select_alpha", "tried": sel.tried}
        if rep is None:
            ctx.put("alpha", None, "qsdlab.lyapunov.select_alpha")
            ctx.check("drift_bound", False, "no alpha in the grid passes")
            return
    else:
        rep = verify_drift_bound(ctx.model, K, float(alpha), R, float(ctx.cfg.get("rho", 1.0)),
                                 float(ctx.cfg.get("c_floor", 10.0)), beta)
    ctx.save("drift.csv", rep)
    op = "qsdlab.lyapunov.verify_drift_bound"
    for k in ("alpha", "beta", "rho", "c_floor", "C", "worst_ratio", "worst_margin", "n_states",
              "region_states", "exhaustive"):
        ctx.put(k, getattr(rep, k), op)
    ctx.put("worst_state", rep.worst_state, op)
    ctx.check("drift_bound", rep.pass_, f"worst margin {rep.worst_margin}")


def exp_four_domains(ctx):
    from .lyapunov import FourDomains, four_domains_constants, log_phi_factory
    from .sim import four_domains_validation

    K = ctx.K()
    ns = ctx.n_star(K)
    alpha = float(ctx.cfg.get("alpha", 0.05)) if ctx.cfg.get("alpha") != "auto" else 0.05
    radii = ctx.cfg.get("radii")
    if radii is None:
        r1 = 3 * math.sqrt(K)
        rm1 = max(0.9 * float(ns.min()), r1 + 5)
        radii = [r1, r1 + 4, rm1, rm1 + 4]
    dom = FourDomains(tuple(int(v) for v in ns), tuple(float(r) for r in radii))
    log_psi = log_phi_factory(ns, K, alpha)
    from .lyapunov import annulus_constants

    const = annulus_constants(ctx.model, K, dom, log_psi)
    fd = four_domains_constants(const.log_a0, const.log_a1_prime, const.log_a2_dprime,
                                const.Lambda, logs=True)
    t = float(ctx.cfg.get("t", fd.t_D1))
    v = four_domains_validation(ctx.model, K, dom, log_psi, t, int(ctx.cfg["replicas"]), ctx.seed,
                                ctx.cfg.get("start"))
    ctx.csv("four_domains.csv", ["t", "success", "stderr", "bound", "Lambda", "eta"],
            [[t, v.success, v.stderr, v.bound, const.Lambda, fd.eta_D1]])
    op = "qsdlab.lyapunov.four_domains_constants"
    ctx.put("radii", list(radii), "config or default rule")
    ctx.put("Lambda", const.Lambda, "qsdlab.lyapunov.annulus_constants")
    ctx.put("t_D1", fd.t_D1, op)
    ctx.put("eta_D1", fd.eta_D1, op)
    ctx.put("clause", fd.clause, op)
    ctx.put("success", v.success, "qsdlab.sim.four_domains_validation")
    ctx.put("bound", v.bound, "qsdlab.lyapunov.lemma_bound")
    ctx.check("empirical_beats_bound", v.passed, f"{v.success} >= {v.bound} - 3*{v.stderr}")


def exp_hypotheses(ctx):
    rep = ctx.audit()
    rows = [[e.id, e.verdict, e.margin, json.dumps(rep.to_dict()["entries"][e.id]["witness"]), e.note]
            for e in rep.entries.values()]
    ctx.csv("hypotheses.csv", ["id", "verdict", "margin", "witness", "note"], rows)
    write_json(ctx.out / "hypotheses.json", rep.to_dict())
    ctx.files.append("hypotheses.json")
    ctx.put("entries", {k: [e.verdict, e.margin] for k, e in rep.entries.items()},
            "qsdlab.model.check_hypotheses")
    ctx.put("beta", rep.beta, "qsdlab.model.check_hypotheses")
    ctx.put("xi", rep.xi, "qsdlab.model.check_hypotheses")
    ctx.check("all_hypotheses_pass", rep.passed)
    return 0 if rep.passed else 2


def exp_reversibility(ctx):
    from .reversibility import (ReversibilityError, case2_closed_form_check, case2_rates,
                                circuit_criterion, construct_reversible_measure, model_rates,
                                plaquette_log_products)

    c2 = ctx.cfg.get("case2")
    if c2:
        rates = case2_rates(c2["lam1"], c2["lam2"], c2["mu1"], c2["mu2"], c2["c"])
        box = ctx.cfg.get("box", [6, 6])
    else:
        K = ctx.K()
        rates = model_rates(ctx.model, K)
        box = ctx.cfg.get("box") or [int(b) for b in 2 * ctx.n_star(K) + 2]
    rep = circuit_criterion(rates, box, float(ctx.cfg.get("tol", 1e-9)))
    rows = []
    for B, i, j, s, ok in plaquette_log_products(rates, box):
        rows += [[*b, i + 1, j + 1, v] for b, v in zip(B[ok], s[ok])]
    ctx.csv("plaquettes.csv", [f"n_{k + 1}" for k in range(rates.d)] + ["i", "j", "log_product"], rows)
    op = "qsdlab.reversibility.circuit_criterion"
    ctx.put("reversible", rep.reversible, op)
    ctx.put("worst_plaquette", rep.worst_plaquette, op)
    ctx.put("worst_log_deviation", rep.worst_log_deviation, op)
    ctx.put("exclusions_present", bool(rep.exclusions), op)
    ctx.put("skipped_plaquettes", rep.skipped, op)
    if c2:
        cf = case2_closed_form_check(c2["lam1"], c2["lam2"], c2["mu1"], c2["mu2"], c2["c"])
        ctx.put("closed_form", cf, "qsdlab.reversibility.case2_closed_form_check")
        if cf["applicable"]:
            ctx.check("closed_form_agrees", cf["reversible"] == rep.reversible)
    if rep.reversible:
        try:
            m = construct_reversible_measure(rates, box)
        except ReversibilityError as e:
            ctx.check("measure_constructed", False, str(e))
            return
        ctx.save("pi.csv", m)
        ctx.put("max_edge_error", m.max_edge_error, "qsdlab.reversibility.construct_reversible_measure")
        ctx.check("edge_balance", m.max_edge_error <= 1e-12)


DISPATCH = {
    "simulate": exp_simulate, "ode": exp_ode, "kurtz": exp_kurtz, "qsd-exact": exp_qsd_exact,
    "qsd-mc": exp_qsd_mc, "fleming-viot": exp_fleming_viot, "tv-curve": exp_tv_curve,
    "mixture": exp_mixture, "extinction-law": exp_extinction_law,
    "lambda0-scaling": exp_lambda0_scaling, "descent-time": exp_descent_time,
    "drift-check": exp_drift_check, "four-domains": exp_four_domains,
    "hypotheses": exp_hypotheses, "reversibility": exp_reversibility,
}


# --------------------------------------------------------------------------
# run

def _known_errors():
    from .conditioned import NoSurvivorsError
    from .lyapunov import DominationError, LemmaError
    from .model import ModelError
    from .ode import IntegrationError
    from .reversibility import ReversibilityError
    from .sim import SimulationError
    from .spectral import QsdConvergenceError, StructuralError

    return (ConfigError, ModelError, SimulationError, StructuralError, QsdConvergenceError,
            NoSurvivorsError, LemmaError, DominationError, ReversibilityError, IntegrationError,
            ValueError)


def run(cfg, experiment=None, seed=None, out=None, skip_audit=None, base_dir=".", stream=sys.stderr):
    """Validate, audit, dispatch and persist.  Returns ``(exit_code, report)``."""
    experiment = experiment or cfg.get("experiment")
    diags = validate_config(cfg, experiment, base_dir)
    errors = [d for d in diags if d.severity == "error"]
    for d in diags:
        print(str(d), file=stream)
    if errors:
        return 1, {"error": "ConfigError", "diagnostics": [str(d) for d in errors]}
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    out = Path(out or os.environ.get("QSDLAB_OUT") or "qsdlab_out")
    skip = bool(cfg.get("skip_audit", False)) if skip_audit is None else skip_audit
    ctx = Context(cfg, experiment, seed, out, base_dir)
    t_start = time.perf_counter()
    code = 0
    needs_model = not (experiment == "reversibility" and "case2" in cfg)
    if needs_model and not skip and experiment != "hypotheses":
        from .model import CallableModel

        if not isinstance(ctx.model, CallableModel):
            rep = ctx.audit()
            if not rep.passed:
                write_json(out / "hypotheses.json", rep.to_dict())
                print(json.dumps({"audit": "failed", "entries": rep.to_dict()["entries"]}), file=stream)
                return 2, {"error": "audit failed", "hypotheses": rep.to_dict()}
    r = DISPATCH[experiment](ctx)
    if isinstance(r, int):
        code = r
    if code == 0 and not all(c["passed"] for c in ctx.checks.values()):
        code = 1
    report = {
        "experiment": experiment, "config_sha256": ctx.hash, "seed": seed,
        "results": ctx.results, "checks": ctx.checks, "passed": code == 0,
        "provenance": ctx.provenance, "files": ctx.files,
        "metadata": {"wall_time_s": time.perf_counter() - t_start,
                     "timestamp": datetime.now(timezone.utc).isoformat(), "qsdlab": __version__},
    }
    write_json(out / "report.json", report)
    return code, report


def build_parser():
    p = argparse.ArgumentParser(prog="qsdlab", description="Quasi-stationary experiments for "
                                "multitype birth-and-death processes.")
    p.add_argument("experiment", help="one of: " + ", ".join(EXPERIMENTS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory (default $QSDLAB_OUT or ./qsdlab_out)")
    p.add_argument("--skip-audit", action="store_true", default=None)
    p.add_argument("--threads", type=int, default=None, help="worker threads for replica loops")
    p.add_argument("--validate-only", action="store_true", help="print diagnostics and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    if args.validate_only:
        diags = validate_config(args.config, args.experiment)
        for d in diags:
            print(str(d))
        return 1 if any(d.severity == "error" for d in diags) else 0
    errors = _known_errors()
    try:
        cfg = _load(args.config)
        code, report = run(cfg, args.experiment, args.seed, args.out, args.skip_audit,
                           Path(args.config).parent)
    except errors as e:
        msg = {"error": type(e).__name__, "message": str(e)}
        w = getattr(e, "witness", None)
        if w is not None:
            msg["witness"] = w if isinstance(w, (int, float, str)) else list(np.ravel(w).tolist())
        print(json.dumps(msg), file=sys.stderr)
        return 1
    summary = {k: v["value"] for k, v in report.get("results", {}).items()
               if isinstance(v["value"], (int, float, str, bool)) or v["value"] is None}
    print(json.dumps({"experiment": args.experiment, "passed": code == 0, **summary}, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
