"""Deterministic limit flow ``x' = B(x) - D(x)`` and the Kurtz deviation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import binomtest

from . import _kernels as kern
from .sim import _check_model, _raise_status

CLIP = 1e-12


class IntegrationError(RuntimeError):
    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


@dataclass
class FlowPath:
    times: np.ndarray
    points: np.ndarray
    stats: dict = field(default_factory=dict)
    dense: object = None

    def __call__(self, t):
        """Dense-output evaluation; returns shape ``(len(t), d)``."""
        return np.atleast_2d(self.dense(np.atleast_1d(t))).T

    def to_csv(self, path, meta=None):
        from .io import write_csv

        d = self.points.shape[1]
        write_csv(path, ["t"] + [f"x_{j + 1}" for j in range(d)],
                  [[t, *p] for t, p in zip(self.times, self.points)], meta)


def integrate(model, x0, t_max, rel_tol=1e-10, abs_tol=1e-12, t_eval=None, n_out=201) -> FlowPath:
    """Dormand-Prince 5(4) with dense output on ``t_eval`` (default: uniform grid)."""
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < 0):
        raise ValueError("x0 must lie in the closed positive orthant")
    if t_eval is None:
        t_eval = np.linspace(0.0, t_max, n_out)
    t_eval = np.asarray(t_eval, dtype=float)
    sol = solve_ivp(lambda t, y: model.drift(y), (0.0, float(t_max)), x0, method="RK45",
                    rtol=rel_tol, atol=abs_tol, dense_output=True)
    if sol.status != 0:
        raise IntegrationError(f"integration stopped at t={sol.t[-1]:.6g}: {sol.message}",
                               t=float(sol.t[-1]), x=sol.y[:, -1].copy())
    pts = sol.sol(t_eval).T
    neg = pts < 0
    stats = {"nfev": int(sol.nfev), "steps": int(sol.t.size - 1), "clipped": bool(neg.any()),
             "min_undershoot": float(pts.min()) if neg.any() else 0.0,
             "excursion_beyond_clip": bool(np.any(pts < -CLIP))}
    pts = np.where(neg, 0.0, pts)
    return FlowPath(t_eval, pts, stats, sol.sol)


def logistic_solution(x0, t, r=1.0, c=1.0):
    """Closed form of ``x' = r x - c x^2``."""
    t = np.asarray(t, dtype=float)
    k = r / c
    return k / (1.0 + (k / x0 - 1.0) * np.exp(-r * t))


@dataclass
class KurtzReport:
    K: float
    eps: float
    replicas: int
    freq: float | None
    ci_low: float | None
    ci_high: float | None
    sups: np.ndarray | None = None
    flow_max_norm: float | None = None

    def to_dict(self):
        return {"K": self.K, "eps": self.eps, "freq": self.freq,
                "ci_low": self.ci_low, "ci_high": self.ci_high}


def kurtz_deviation(model, K, x0, t_bar, eps, replicas, seed, grid=2048, stream0=0) -> KurtzReport:
    """Frequency of ``sup_{t <= t_bar} |N(t)/K - x(t)|_1 > eps`` with a Wilson interval.

    ``N(0) = floor(K x0)``.  The supremum is taken at every jump instant and on
    the uniform grid of step ``t_bar / grid``; between grid nodes the flow is
    interpolated by cubic Hermite polynomials built from the dense output and
    the vector field.
    """
    if replicas == 0:
        return KurtzReport(float(K), float(eps), 0, None, None, None)
    _check_model(model)
    x0 = np.asarray(x0, dtype=float)
    n0 = np.floor(K * x0 + 1e-9).astype(np.int64)
    tg = np.linspace(0.0, t_bar, grid + 1)
    flow = integrate(model, x0, t_bar, t_eval=tg)
    xs = np.ascontiguousarray(flow.points)
    fs = np.ascontiguousarray(model.drift(xs))
    sup, status = kern.batch_kurtz_sup(*model.kernel_arrays(), float(K), n0, xs, fs, float(t_bar),
                                       np.uint64(seed), np.uint64(stream0), int(replicas),
                                       int(10**9))
    bad = np.flatnonzero(status)
    if bad.size:
        _raise_status(status[bad[0]])
    k = int(np.sum(sup > eps))
    ci = binomtest(k, replicas).proportion_ci(0.95, method="wilson")
    return KurtzReport(float(K), float(eps), int(replicas), k / replicas, float(ci.low),
                       float(ci.high), sup, float(np.abs(xs).sum(axis=1).max()))
