"""Polynomial birth and death vector fields.

A model is a pair of vector fields ``B, D : R^d_+ -> R^d_+``.  The jump
process at scale ``K`` has birth rate ``K * B_j(n / K)`` and death rate
``K * D_j(n / K)`` in direction ``j``.  Fields are stored as coefficient
tables of monomials so that Jacobians, gradients at the origin and the
reversibility checks are exact.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp, trapezoid
from scipy.stats import linregress


class ModelError(ValueError):
    """Invalid model or model evaluation (carries a witness state)."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True)
class Monomial:
    coeff: float
    exps: tuple[int, ...]


@dataclass(frozen=True)
class RateField:
    """A polynomial vector field ``x -> (F_1(x), ..., F_d(x))``.

    ``terms[j]`` is the list of monomials of the ``j``-th component.
    """

    d: int
    terms: tuple[tuple[Monomial, ...], ...]
    builtin: str | None = None

    def __post_init__(self):
        if self.d < 1:
            raise ModelError("dimension must be positive")
        if len(self.terms) != self.d:
            raise ModelError(f"expected {self.d} components, got {len(self.terms)}")
        for comp in self.terms:
            for m in comp:
                if len(m.exps) != self.d or any(e < 0 for e in m.exps):
                    raise ModelError(f"bad exponent vector {m.exps}")

    @classmethod
    def from_lists(cls, d, comps, builtin=None):
        """Build from ``[[(coeff, exps), ...], ...]``."""
        terms = tuple(
            tuple(Monomial(float(c), tuple(int(e) for e in exps)) for c, exps in comp)
            for comp in comps
        )
        return cls(d, terms, builtin)

    def arrays(self):
        """Flattened ``(coeff, exps, component)`` arrays used by the kernels."""
        coef, exps, comp = [], [], []
        for j, mons in enumerate(self.terms):
            for m in mons:
                coef.append(m.coeff)
                exps.append(m.exps)
                comp.append(j)
        return (
            np.asarray(coef, dtype=np.float64),
            np.asarray(exps, dtype=np.int64).reshape(len(coef), self.d),
            np.asarray(comp, dtype=np.int64),
        )

    def __call__(self, x):
        """Evaluate at one point (shape ``(d,)``) or many (shape ``(N, d)``)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        coef, exps, comp = self.arrays()
        out = np.zeros((X.shape[0], self.d))
        if coef.size:
            mon = np.prod(X[:, None, :] ** exps[None, :, :], axis=2) * coef
            for j in range(self.d):
                out[:, j] = mon[:, comp == j].sum(axis=1)
        return out[0] if single else out

    def jacobian(self, x):
        """Exact Jacobian ``dF_i/dx_k`` at a single point."""
        x = np.asarray(x, dtype=np.float64)
        J = np.zeros((self.d, self.d))
        for i, mons in enumerate(self.terms):
            for m in mons:
                for k in range(self.d):
                    e = m.exps[k]
                    if e == 0:
                        continue
                    v = m.coeff * e
                    for l in range(self.d):
                        p = m.exps[l] - (1 if l == k else 0)
                        if p:
                            v *= x[l] ** p
                    J[i, k] += v
        return J

    def to_json(self):
        return [
            [{"coeff": repr(m.coeff), "exps": list(m.exps)} for m in comp]
            for comp in self.terms
        ]


@dataclass(frozen=True)
class Model:
    """Birth field ``B`` and death field ``D`` of one process family."""

    birth: RateField
    death: RateField
    name: str = "model"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.birth.d != self.death.d:
            raise ModelError("birth and death fields have different dimensions")

    @property
    def d(self):
        return self.birth.d

    def drift(self, x):
        return self.birth(x) - self.death(x)

    def drift_jacobian(self, x):
        return self.birth.jacobian(x) - self.death.jacobian(x)

    def rates(self, states, K):
        """Scaled rates ``(K B(n/K), K D(n/K))`` for an ``(N, d)`` state array."""
        n = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return K * self.birth(n / K), K * self.death(n / K)

    def kernel_arrays(self):
        return self.birth.arrays() + self.death.arrays()

    def to_dict(self):
        return {
            "name": self.name,
            "d": self.d,
            "birth": self.birth.to_json(),
            "death": self.death.to_json(),
        }


class CallableModel:
    """Escape hatch for non-polynomial rate fields.

    ``birth`` and ``death`` map an ``(N, d)`` array of points to ``(N, d)``
    rates.  Usable with ``eval_rates``, the truncated generator and the drift
    scans; the compiled simulator, model files and the reversibility checker
    require a polynomial :class:`Model`.
    """

    def __init__(self, d, birth: Callable, death: Callable, name="callable"):
        self.d = d
        self.birth = _VectorFn(birth)
        self.death = _VectorFn(death)
        self.name = name
        self.params = {}

    def drift(self, x):
        return self.birth(x) - self.death(x)

    def drift_jacobian(self, x, h=1e-7):
        x = np.asarray(x, dtype=float)
        J = np.zeros((self.d, self.d))
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = h * max(1.0, abs(x[k]))
            J[:, k] = (self.drift(x + e) - self.drift(x - e)) / (2 * e[k])
        return J

    def rates(self, states, K):
        n = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return K * self.birth(n / K), K * self.death(n / K)


class _VectorFn:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.fn(np.atleast_2d(x)), dtype=float)
        return out[0] if x.ndim == 1 else out


def _parse_field(d, comps):
    parsed = []
    for comp in comps:
        parsed.append([(float(t["coeff"]), t["exps"]) for t in comp])
    return RateField.from_lists(d, parsed)


def model_from_dict(doc) -> Model:
    d = int(doc["d"])
    return Model(_parse_field(d, doc["birth"]), _parse_field(d, doc["death"]),
                 doc.get("name", "model"))


def load_model(path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def save_model(model: Model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n")


def load_fixture(name) -> Model:
    """Load one of the models shipped in ``qsdlab/fixtures``."""
    from importlib.resources import files

    return model_from_dict(json.loads(files("qsdlab.fixtures").joinpath(f"{name}.json").read_text()))


# --------------------------------------------------------------------------
# builtins

def builtin_competition_model(lam, mu, kappa, d) -> Model:
    """``B_j = lam * S``, ``D_j = x_j (mu + kappa * S)`` with ``S = sum(x)``."""
    if not (mu > 0 and kappa > 0 and d >= 1):
        raise ModelError(f"need mu > 0, kappa > 0, d >= 1 (got mu={mu}, kappa={kappa}, d={d})")
    if not lam > mu / d:
        raise ModelError(f"lambda > mu/d violated: {lam} <= {mu / d}")
    unit = np.eye(d, dtype=int)
    birth, death = [], []
    for j in range(d):
        birth.append([(lam, tuple(unit[k])) for k in range(d)])
        comp = [(mu, tuple(unit[j]))]
        comp += [(kappa, tuple(unit[j] + unit[k])) for k in range(d)]
        death.append(comp)
    return Model(
        RateField.from_lists(d, birth, "competition"),
        RateField.from_lists(d, death, "competition"),
        name="competition",
        params={"lambda": lam, "mu": mu, "kappa": kappa, "d": d},
    )


def builtin_logistic_model(b=2.0, mu=1.0, c=1.0) -> Model:
    """One type: ``B(x) = b x``, ``D(x) = x (mu + c x)``."""
    birth = RateField.from_lists(1, [[(b, (1,))]], "logistic")
    death = RateField.from_lists(1, [[(mu, (1,)), (c, (2,))]], "logistic")
    return Model(birth, death, name="logistic", params={"b": b, "mu": mu, "c": c})


def competition_fixed_point(lam, mu, kappa, d):
    s_star = (lam * d - mu) / kappa
    return np.full(d, s_star / d)


# --------------------------------------------------------------------------
# rates

def eval_rates(model, n, K):
    """Birth and death rate vectors at lattice state ``n``.

    Raises :class:`ModelError` on a negative or non-finite rate, and when a
    death rate is positive in a direction whose coordinate is already 0.
    """
    if K <= 0:
        raise ModelError(f"K must be positive, got {K}")
    n = np.asarray(n)
    if n.ndim != 1 or n.shape[0] != model.d:
        raise ModelError(f"state must have {model.d} coordinates")
    if np.any(n < 0):
        raise ModelError("state has a negative coordinate", witness=tuple(int(v) for v in n))
    b, dth = model.rates(n[None, :], K)
    b, dth = b[0], dth[0]
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(dth))):
        raise ModelError("non-finite rate", witness=tuple(int(v) for v in n))
    if np.any(b < 0) or np.any(dth < 0):
        raise ModelError(f"negative rate at {tuple(int(v) for v in n)}: birth={b}, death={dth}",
                         witness=tuple(int(v) for v in n))
    if np.any((n == 0) & (dth > 0)):
        raise ModelError("death rate positive on an empty coordinate", witness=tuple(int(v) for v in n))
    return b, dth


# --------------------------------------------------------------------------
# fixed point

@dataclass
class FixedPointResult:
    x_star: np.ndarray
    jacobian_eigs_at_zero: np.ndarray
    jacobian_eigs_at_xstar: np.ndarray
    converged: bool
    residual: float
    iterations: int = 0
    method: str = "newton"


def _newton(model, x, tol, max_iter):
    F = model.drift(x)
    res = np.max(np.abs(F))
    it = 0
    while it < max_iter and res > tol:
        it += 1
        try:
            step = np.linalg.solve(model.drift_jacobian(x), F)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            x_new = x - t * step
            if np.all(x_new > 0):
                F_new = model.drift(x_new)
                r_new = np.max(np.abs(F_new))
                if r_new < res or r_new <= tol:
                    break
            t *= 0.5
        else:
            break
        x, F, res = x_new, F_new, r_new
    return x, res, it


def find_fixed_point(model, x0=None, tol=1e-12, max_iter=100) -> FixedPointResult:
    """Interior zero of ``B - D`` by damped Newton, with an ODE relaxation fallback."""
    d = model.d
    x0 = np.ones(d) if x0 is None else np.asarray(x0, dtype=float)
    if np.any(x0 <= 0):
        raise ModelError("x0 must be strictly positive")
    x, res, it = _newton(model, x0.copy(), tol, max_iter)
    method = "newton"
    if res > tol or not np.all(x > 0):
        sol = solve_ivp(lambda t, y: model.drift(np.maximum(y, 0.0)), (0.0, 200.0), x0,
                        rtol=1e-10, atol=1e-12)
        x1 = np.maximum(sol.y[:, -1], 1e-12)
        x, res, it2 = _newton(model, x1, tol, max_iter)
        it += it2
        method = "relaxation+newton"
    converged = bool(res <= tol and np.all(x > 0))
    return FixedPointResult(
        x_star=x,
        jacobian_eigs_at_zero=np.linalg.eigvals(model.drift_jacobian(np.zeros(d))),
        jacobian_eigs_at_xstar=np.linalg.eigvals(model.drift_jacobian(x)),
        converged=converged,
        residual=float(res),
        iterations=it,
        method=method,
    )


def lattice_fixed_point(model, K, x_star=None):
    """``n* = floor(K x*)``."""
    if x_star is None:
        fp = find_fixed_point(model)
        if not fp.converged:
            raise ModelError("no interior fixed point found")
        x_star = fp.x_star
    return np.floor(K * np.asarray(x_star) + 1e-9).astype(np.int64)


# --------------------------------------------------------------------------
# hypothesis audit

@dataclass
class HypothesisEntry:
    id: str
    verdict: str  # "pass" | "fail" | "inconclusive"
    witness: object = None
    margin: float = float("nan")
    note: str = ""


@dataclass
class AuditSpec:
    """Audit grid: box ``[0, R]^d`` at ``resolution`` points per axis."""

    R: float
    L: float
    resolution: int = 64
    s_max: float | None = None
    s0: float | None = None
    tol: float = 1e-9


@dataclass
class HypothesisReport:
    entries: dict
    spec: AuditSpec
    x_star: np.ndarray | None = None
    beta: float = float("nan")
    xi: float = float("nan")

    @property
    def passed(self):
        return all(e.verdict == "pass" for e in self.entries.values())

    def summary(self):
        return {k: (e.verdict, e.margin) for k, e in self.entries.items()}

    def to_dict(self):
        def clean(w):
            if w is None:
                return None
            if isinstance(w, (float, int, np.floating, np.integer)):
                return float(w)
            return [float(v) for v in np.ravel(w)]

        return {
            "passed": self.passed,
            "R": self.spec.R, "L": self.spec.L, "resolution": self.spec.resolution,
            "x_star": None if self.x_star is None else [float(v) for v in self.x_star],
            "beta": float(self.beta), "xi": float(self.xi),
            "entries": {k: {"verdict": e.verdict, "witness": clean(e.witness),
                            "margin": float(e.margin), "note": e.note}
                        for k, e in self.entries.items()},
        }


def _grid(R, resolution, d):
    ax = np.linspace(0.0, R, resolution)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _simplex_points(d, m):
    """Barycentric lattice points of the unit simplex with ``m`` subdivisions."""
    if d == 1:
        return np.ones((1, 1))
    pts = []

    def rec(prefix, left, k):
        if k == 1:
            pts.append(prefix + [left])
            return
        for i in range(left + 1):
            rec(prefix + [i], left - i, k - 1)

    rec([], m, d)
    return np.asarray(pts, dtype=float) / m


def envelopes(model, s, resolution=64):
    """``B_max(s)`` and ``D_min(s)``: extrema of the total rates on ``|x|_1 = s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    simplex = _simplex_points(model.d, resolution)
    P = simplex.shape[0]
    bmax = np.empty(s.size)
    dmin = np.empty(s.size)
    step = max(1, 200_000 // P)
    for a in range(0, s.size, step):
        sc = s[a:a + step]
        X = (sc[:, None, None] * simplex[None]).reshape(-1, model.d)
        bmax[a:a + step] = model.birth(X).sum(axis=1).reshape(sc.size, P).max(axis=1)
        dmin[a:a + step] = model.death(X).sum(axis=1).reshape(sc.size, P).min(axis=1)
    return bmax, dmin


def check_hypotheses(model, spec: AuditSpec, x0=None) -> HypothesisReport:
    """Grid audit of the standing hypotheses on ``B`` and ``D``.

    Every ``fail`` carries a witness point.  Grid estimates whose margin is
    below ``spec.tol`` are reported as inconclusive.
    """
    d, R, L, tol = model.d, spec.R, spec.L, spec.tol
    X = _grid(R, spec.resolution, d)
    nonzero = np.any(X > 0, axis=1)
    Bx, Dx = model.birth(X), model.death(X)
    entries = {}

    # H0 ------------------------------------------------------------
    m = min(Bx.min(), Dx.min())
    if m < 0:
        k = np.unravel_index(np.argmin(np.minimum(Bx, Dx)), Bx.shape)[0]
        entries["H0"] = HypothesisEntry("H0", "fail", X[k], m, "negative rate on grid")
    else:
        entries["H0"] = HypothesisEntry("H0", "pass", None, m)

    # H1 ------------------------------------------------------------
    bnorm = np.abs(Bx).max(axis=1)
    dnorm = np.abs(Dx).max(axis=1)
    zero_b = nonzero & (bnorm == 0)
    zero_d = nonzero & (dnorm == 0)
    eig0 = np.linalg.eigvals(model.drift_jacobian(np.zeros(d)))
    unstable = eig0.real.max()
    if zero_b.any() or zero_d.any():
        k = np.flatnonzero(zero_b | zero_d)[0]
        entries["H1"] = HypothesisEntry("H1", "fail", X[k], 0.0, "field vanishes away from 0")
    elif bnorm[~nonzero].max() > 0 or dnorm[~nonzero].max() > 0:
        entries["H1"] = HypothesisEntry("H1", "fail", np.zeros(d), 0.0, "field nonzero at 0")
    elif unstable <= tol:
        entries["H1"] = HypothesisEntry("H1", "fail", np.zeros(d), unstable,
                                        "origin not linearly unstable")
    else:
        entries["H1"] = HypothesisEntry("H1", "pass", None, unstable,
                                        "margin: largest real part of Jacobian at 0")

    # H2 ------------------------------------------------------------
    fp = find_fixed_point(model, x0)
    x_star = fp.x_star if fp.converged else None
    if fp.converged:
        entries["H2"] = HypothesisEntry("H2", "pass", None, float(fp.x_star.min()),
                                        f"residual {fp.residual:.3g}")
    else:
        entries["H2"] = HypothesisEntry("H2", "fail", fp.x_star, fp.residual,
                                        "no interior fixed point")

    beta = float("nan")
    if x_star is None:
        for h in ("H3", "H4"):
            entries[h] = HypothesisEntry(h, "inconclusive", None, float("nan"), "needs x*")
    else:
        # H3 --------------------------------------------------------
        norm = np.linalg.norm(X, axis=1)
        diff = X - x_star
        dist2 = np.einsum("ij,ij->i", diff, diff)
        mask = nonzero & (norm < R) & (dist2 > 1e-20)
        inner = np.einsum("ij,ij->i", Bx - Dx, diff)
        ratio = -inner[mask] / (norm[mask] * dist2[mask])
        k = np.argmin(ratio)
        beta = float(ratio[k])
        if np.linalg.norm(x_star) >= R:
            entries["H3"] = HypothesisEntry("H3", "fail", x_star, R - np.linalg.norm(x_star),
                                            "x* outside B(0, R)")
        elif beta < -tol:
            entries["H3"] = HypothesisEntry("H3", "fail", X[mask][k], beta)
        elif beta <= tol:
            entries["H3"] = HypothesisEntry("H3", "inconclusive", X[mask][k], beta)
        else:
            entries["H3"] = HypothesisEntry("H3", "pass", X[mask][k], beta,
                                            "margin: largest feasible beta; witness attains it")
        # H4 --------------------------------------------------------
        r = 0.5 * x_star.min()
        top = x_star.sum() + r * math.sqrt(d)
        margins = {"sum(x*) < L": L - x_star.sum(), "ball within simplex": L - top,
                   "simplex within B(0,R)": R - L}
        worst = min(margins, key=margins.get)
        if margins[worst] > tol:
            entries["H4"] = HypothesisEntry("H4", "pass", None, margins[worst])
        else:
            entries["H4"] = HypothesisEntry("H4", "fail", margins[worst], margins[worst], worst)

    # H5 ------------------------------------------------------------
    s_max = spec.s_max if spec.s_max is not None else 100.0 * L
    s = np.geomspace(L * (1 + 1e-9), s_max, 200)
    bmax, dmin = envelopes(model, s, spec.resolution)
    with np.errstate(divide="ignore", invalid="ignore"):
        h5 = np.where(dmin > 0, bmax / dmin, np.inf)
    k = int(np.argmax(h5))
    sup = float(h5[k])
    if sup >= 0.5:
        entries["H5"] = HypothesisEntry("H5", "fail", s[k], 0.5 - sup, "ratio at witness s")
    elif 0.5 - sup <= tol or k == s.size - 1:
        entries["H5"] = HypothesisEntry("H5", "inconclusive", s[k], 0.5 - sup,
                                        "sup attained at grid end")
    else:
        entries["H5"] = HypothesisEntry("H5", "pass", s[k], 0.5 - sup)

    # H6 ------------------------------------------------------------
    s0 = spec.s0 if spec.s0 is not None else L
    s6 = np.geomspace(1.0, s_max, 400)
    _, d6 = envelopes(model, s6, spec.resolution)
    tail = s6 >= s0
    mono = bool(np.all(np.diff(d6[tail]) >= -1e-12 * np.abs(d6[tail][1:])))
    last = s6 >= s_max / 10
    if np.any(d6[last] <= 0):
        entries["H6"] = HypothesisEntry("H6", "fail", float(s6[last][np.argmin(d6[last])]), 0.0,
                                        "D_min vanishes")
    else:
        fit = linregress(np.log(s6[last]), np.log(d6[last]))
        p = fit.slope
        body = trapezoid(1.0 / d6, s6)
        if not mono:
            k = np.flatnonzero(np.diff(d6[tail]) < 0)[0]
            entries["H6"] = HypothesisEntry("H6", "inconclusive", float(s6[tail][k]), p - 1,
                                            "D_min not monotone beyond s0")
        elif p <= 1 + tol:
            entries["H6"] = HypothesisEntry("H6", "inconclusive", float(s_max), p - 1,
                                            f"tail exponent {p:.3g} <= 1")
        else:
            c = math.exp(fit.intercept)
            integral = body + s_max ** (1 - p) / (c * (p - 1))
            entries["H6"] = HypothesisEntry("H6", "pass", None, p - 1,
                                            f"integral of 1/D_min over [1, inf) ~ {integral:.6g}")

    # H7 ------------------------------------------------------------
    xmax = X.max(axis=1)
    r7 = Dx[nonzero].max(axis=1) / xmax[nonzero]
    k = int(np.argmin(r7))
    xi = float(r7[k])
    if xi > tol:
        entries["H7"] = HypothesisEntry("H7", "pass", X[nonzero][k], xi,
                                        "margin: inf of max_j D_j / max_l x_l")
    elif xi < 0:
        entries["H7"] = HypothesisEntry("H7", "fail", X[nonzero][k], xi)
    else:
        entries["H7"] = HypothesisEntry("H7", "fail", X[nonzero][k], xi, "death rate not bounded below")

    # H8 ------------------------------------------------------------
    if not isinstance(model, Model):
        entries["H8"] = HypothesisEntry("H8", "inconclusive", None, float("nan"),
                                        "needs a polynomial birth field")
        g = h8 = None
    else:
        g = np.diag(model.birth.jacobian(np.zeros(d)))
        h8 = float(g.min())
    if h8 is None:
        pass
    elif h8 > tol:
        entries["H8"] = HypothesisEntry("H8", "pass", None, h8)
    else:
        entries["H8"] = HypothesisEntry("H8", "fail", int(np.argmin(g)), h8,
                                        "witness: type index")

    order = ["H0", "H1", "H2", "H3", "H4", "H5", "H6", "H7", "H8"]
    return HypothesisReport({k: entries[k] for k in order}, spec, x_star, beta, xi)


def default_audit_spec(model) -> AuditSpec:
    """Audit radii for the builtins; other models must supply their own."""
    p = getattr(model, "params", {}) or {}
    if getattr(model, "name", "") == "competition" and "kappa" in p:
        lam, mu, kappa, d = p["lambda"], p["mu"], p["kappa"], p["d"]
        # smallest L with d*lam/(mu + kappa s) < 1/2 beyond it, rounded up
        L = max(math.floor(2 * d * lam / kappa - mu / kappa) + 1.0,
                math.ceil((lam * d - mu) / kappa * (1 + 0.5 / math.sqrt(d))) + 1.0)
        return AuditSpec(R=L + 2.0, L=L)
    if getattr(model, "name", "") == "logistic" and "b" in p:
        b, mu, c = p["b"], p["mu"], p["c"]
        L = math.floor(2 * b / c - mu / c) + 1.0
        L = max(L, math.ceil(1.5 * (b - mu) / c) + 1.0)
        return AuditSpec(R=L + 2.0, L=L)
    warnings.warn("no default audit radii for this model; using R=10, L=8")
    return AuditSpec(R=10.0, L=8.0)
