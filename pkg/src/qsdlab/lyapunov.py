"""Quadratic-exponential Lyapunov function, drift scans, four-domains constants
and the one-dimensional dominating chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.integrate import quad

from .model import envelopes, find_fixed_point

ALPHA_GRID = (0.25, 0.1, 0.05, 0.02, 0.01)
RHO_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0)
FLOOR_GRID = (5.0, 10.0, 20.0, 40.0)
ENUM_BUDGET = 5_000_000
SHELL_SAMPLES = 10_000


class LemmaError(ValueError):
    """A hypothesis of the four-domains lemma is violated."""


class DominationError(ValueError):
    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


def _check_alpha(alpha):
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")


def _n_star(model, K, n_star=None):
    if n_star is not None:
        return np.asarray(n_star, dtype=float)
    fp = find_fixed_point(model)
    return np.floor(K * fp.x_star + 1e-9)


def phi(n, n_star, K, alpha):
    """``exp((alpha/K) ||n - n*||^2)``."""
    _check_alpha(alpha)
    z = np.asarray(n, float) - np.asarray(n_star, float)
    return np.exp(alpha / K * np.sum(z * z, axis=-1))


def log_phi_factory(n_star, K, alpha):
    _check_alpha(alpha)
    c = np.asarray(n_star, float)

    def log_phi(n):
        z = np.asarray(n, float) - c
        return alpha / K * np.sum(z * z, axis=-1)

    return log_phi


def drift_ratio(model, K, alpha, n, n_star=None):
    """``(L phi / phi)(n)`` for one state or an ``(N, d)`` array of states.

    Each neighbour ratio ``phi(n +- e_j) / phi(n)`` is ``exp`` of
    ``(alpha/K)(+-2(n_j - n*_j) + 1)``; the sum is formed with ``expm1`` and, when
    an exponent is too large for that, through the log of the positive part.
    """
    _check_alpha(alpha)
    ns = _n_star(model, K, n_star)
    n = np.asarray(n)
    X = np.atleast_2d(n).astype(float)
    if np.any(~X.any(axis=1)):
        raise ValueError("the drift ratio is not defined at the origin")
    b, dth = model.rates(X, K)
    z = X - ns
    ep = alpha / K * (2 * z + 1)
    em = alpha / K * (-2 * z + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        terms = np.concatenate([b * np.expm1(ep), dth * np.expm1(em)], axis=1)
        out = terms.sum(axis=1)
    big = ~np.isfinite(out)
    if big.any():
        rates = np.concatenate([b, dth], axis=1)[big]
        expo = np.concatenate([ep, em], axis=1)[big]
        with np.errstate(divide="ignore"):
            logpos = np.where((expo > 0) & (rates > 0),
                              np.log(rates) + expo + np.log(-np.expm1(-np.maximum(expo, 1e-300))),
                              -np.inf)
        neg = np.where(expo <= 0, rates * np.expm1(expo), 0.0).sum(axis=1)
        top = logpos.max(axis=1)
        lse = top + np.log(np.exp(logpos - top[:, None]).sum(axis=1))
        out[big] = np.where(lse < 709.0, np.exp(np.minimum(lse, 709.0)) + neg, np.inf)
    return out[0] if n.ndim == 1 else out


def drift_ratio_naive(model, K, alpha, n, n_star=None):
    """Direct ``sum rate * (phi(neighbour) / phi(n) - 1)`` (reference only)."""
    ns = _n_star(model, K, n_star)
    n = np.asarray(n, dtype=float)
    b, dth = model.rates(n[None, :], K)
    p0 = phi(n, ns, K, alpha)
    s = 0.0
    for j in range(n.size):
        e = np.zeros(n.size)
        e[j] = 1
        s += b[0, j] * (phi(n + e, ns, K, alpha) / p0 - 1)
        s += dth[0, j] * (phi(n - e, ns, K, alpha) / p0 - 1)
    return float(s)


# --------------------------------------------------------------------------
# drift scans

def ball_states(radius, d, center=None, budget=ENUM_BUDGET):
    """Lattice points of ``Z^d_+ \\ {0}`` with ``||n - center|| <= radius``.

    Returns ``None`` if the enclosing box exceeds ``budget`` points.
    """
    c = np.zeros(d) if center is None else np.asarray(center, float)
    lo = np.maximum(np.floor(c - radius), 0).astype(int)
    hi = np.ceil(c + radius).astype(int)
    if np.prod(hi - lo + 1, dtype=float) > budget:
        return None
    grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    z = X - c
    keep = (np.einsum("ij,ij->i", z, z) <= radius * radius) & X.any(axis=1)
    return X[keep]


def shell_sample(radius, d, rng, samples=SHELL_SAMPLES):
    """Stratified sample of the positive-orthant ball by unit-width radius shells."""
    out = []
    for k in range(int(math.ceil(radius))):
        r = rng.uniform(k, min(k + 1, radius), samples)
        v = np.abs(rng.standard_normal((samples, d)))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        X = np.floor(v * r[:, None] + 0.5).astype(np.int64)
        out.append(X[X.any(axis=1) & (np.linalg.norm(X, axis=1) <= radius)])
    return np.unique(np.concatenate(out), axis=0)


@dataclass
class DriftReport:
    K: float
    alpha: float
    beta: float
    R_ball: float
    rho: float
    c_floor: float
    C: float                   # minimal constant of the global inequality
    worst_state: tuple | None  # largest excess in the negative-drift region
    worst_ratio: float         # (L phi / phi) at worst_state
    worst_margin: float        # ratio + (alpha beta / 2)(|n|/K)(|n - n*|^2/K) there
    pass_: bool
    exhaustive: bool
    n_states: int
    region_states: int
    states: np.ndarray | None = field(default=None, repr=False)
    ratios: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if k not in ("states", "ratios")}

    def to_csv(self, path, meta=None):
        from .io import write_csv

        d = self.states.shape[1]
        write_csv(path, [f"n_{j + 1}" for j in range(d)] + ["ratio"],
                  [[*s, r] for s, r in zip(self.states, self.ratios)], meta)


def _scan(model, K, alpha, R_ball, n_star, seed=0):
    X = ball_states(R_ball * K, model.d)
    exhaustive = X is not None
    if not exhaustive:
        X = shell_sample(R_ball * K, model.d, np.random.default_rng(seed))
    r = drift_ratio(model, K, alpha, X, n_star)
    z = X - n_star
    norm = np.linalg.norm(X, axis=1)
    dist2 = np.einsum("ij,ij->i", z, z)
    return X, r, norm, dist2, exhaustive


def _region_margin(r, g, norm, dist2, K, rho, c_floor):
    region = (norm >= c_floor) & (dist2 >= rho * rho * K)
    excess = r + 0.5 * g
    return region, excess


def verify_drift_bound(model, K, alpha, R_ball, rho, c_floor, beta, n_star=None,
                       seed=0) -> DriftReport:
    """Scan ``B(0, R K)``: minimal ``C`` and the sign condition on the negative-drift region."""
    _check_alpha(alpha)
    ns = _n_star(model, K, n_star)
    X, r, norm, dist2, exh = _scan(model, K, alpha, R_ball, ns, seed)
    return _report(X, r, norm, dist2, exh, K, alpha, beta, R_ball, rho, c_floor)


def _report(X, r, norm, dist2, exh, K, alpha, beta, R_ball, rho, c_floor):
    g = alpha * beta * (norm / K) * (dist2 / K)
    C = float(np.max(r + g))
    region, excess = _region_margin(r, g, norm, dist2, K, rho, c_floor)
    if region.any():
        k = np.flatnonzero(region)[np.argmax(excess[region])]
        ws, wr, wm = tuple(int(v) for v in X[k]), float(r[k]), float(excess[k])
    else:
        ws, wr, wm = None, float("nan"), -math.inf
    return DriftReport(float(K), alpha, beta, R_ball, rho, c_floor, C, ws, wr, wm,
                       bool(region.any() and wm <= 0 and np.isfinite(C)), exh, int(X.shape[0]),
                       int(region.sum()), X, r)


@dataclass
class AlphaSelection:
    alpha: float | None
    rho: float | None
    c_floor: float | None
    report: DriftReport | None
    tried: list


def select_alpha(model, K, beta, R_ball, alphas=ALPHA_GRID, rhos=RHO_GRID, floors=FLOOR_GRID,
                 n_star=None, seed=0) -> AlphaSelection:
    """Largest ``alpha`` in the grid whose negative-drift scan passes for some ``(rho, c_floor)``.

    For that ``alpha`` the smallest passing ``rho`` is taken, then the smallest floor.
    """
    ns = _n_star(model, K, n_star)
    tried = []
    for alpha in sorted(alphas, reverse=True):
        X, r, norm, dist2, exh = _scan(model, K, alpha, R_ball, ns, seed)
        for rho, cf in product(sorted(rhos), sorted(floors)):
            rep = _report(X, r, norm, dist2, exh, K, alpha, beta, R_ball, rho, cf)
            if rep.pass_:
                tried.append((alpha, rho, cf, True))
                return AlphaSelection(alpha, rho, cf, rep, tried)
        tried.append((alpha, None, None, False))
    return AlphaSelection(None, None, None, None, tried)


# --------------------------------------------------------------------------
# four domains

@dataclass(frozen=True)
class FourDomains:
    """Nested closed balls ``D1 < D0 < D-1 < D-2`` around ``center`` (origin removed)."""

    center: tuple
    radii: tuple  # (r1, r0, r_minus1, r_minus2)

    def __post_init__(self):
        r = self.radii
        if len(r) != 4 or not (0 < r[0] < r[1] < r[2] < r[3]):
            raise ValueError("radii must be strictly increasing and positive")
        if r[3] - r[2] < 1:
            raise ValueError("the outer shell must be at least one lattice step thick")

    def shells(self, X):
        z = np.asarray(X, float) - np.asarray(self.center, float)
        dist = np.sqrt(np.einsum("ij,ij->i", z, z))
        r1, r0, rm1, rm2 = self.radii
        return dist <= r1, (dist > r1) & (dist <= r0), (dist > r0) & (dist <= rm1), \
            (dist > rm1) & (dist <= rm2)

    def in_h0(self, n):
        return bool(self.shells(np.atleast_2d(n))[1][0])

    def states(self):
        return ball_states(self.radii[3], len(self.center), self.center)


@dataclass
class AnnulusConstants:
    log_a0: float
    log_a1_prime: float
    log_a2_dprime: float
    Lambda: float
    argmax_h0: np.ndarray
    counts: dict


def annulus_constants(model, K, domains: FourDomains, log_psi) -> AnnulusConstants:
    """``a0 = sup_H0 psi``, ``a'_-1 = inf_{H-1 u H0} psi``, ``a''_-2 = inf_H-2 psi`` and
    ``Lambda = -sup (L psi / psi)`` over ``H-2 u H-1 u H0``, by enumeration (log-space)."""
    X = domains.states()
    if X is None or X.shape[0] == 0:
        raise ValueError("domains too large to enumerate or empty")
    d1, h0, hm1, hm2 = domains.shells(X)
    if not (h0.any() and hm1.any() and hm2.any() and d1.any()):
        raise LemmaError("some shell contains no lattice state")
    lp = log_psi(X)
    ring = h0 | hm1 | hm2
    R = X[ring]
    b, dth = model.rates(R, K)
    base = log_psi(R)
    s = np.zeros(R.shape[0])
    for j in range(model.d):
        e = np.zeros(model.d, dtype=np.int64)
        e[j] = 1
        s += b[:, j] * np.expm1(log_psi(R + e) - base)
        down = R - e
        ok = R[:, j] > 0
        val = np.zeros(R.shape[0])
        val[ok] = np.expm1(log_psi(down[ok]) - base[ok])
        s += dth[:, j] * val
    k0 = np.flatnonzero(h0)[np.argmax(lp[h0])]
    return AnnulusConstants(float(lp[h0].max()), float(lp[h0 | hm1].min()), float(lp[hm2].min()),
                            float(-s.max()), X[k0].copy(),
                            {"D1": int(d1.sum()), "H0": int(h0.sum()), "H-1": int(hm1.sum()),
                             "H-2": int(hm2.sum())})


@dataclass
class FourDomainsResult:
    t_D1: float
    eta_D1: float
    clause: int
    clauses: dict


def four_domains_constants(a0, a1_prime, a2_dprime, Lambda, logs=False) -> FourDomainsResult:
    """Both time/failure pairs of the four-domains bound; returns the smaller failure.

    With ``logs=True`` the three ``a`` arguments are natural logs.
    """
    if logs:
        la0, la1, la2 = float(a0), float(a1_prime), float(a2_dprime)
    else:
        if min(a0, a1_prime, a2_dprime) <= 0:
            raise LemmaError("psi must be positive")
        la0, la1, la2 = math.log(a0), math.log(a1_prime), math.log(a2_dprime)
    if not Lambda > 0:
        raise LemmaError(f"Lambda = {Lambda} <= 0: drift condition fails, lemma inapplicable")
    if la0 - la2 >= 0:
        raise LemmaError(f"a0 / a''_-2 = {math.exp(min(la0 - la2, 700)):.6g} >= 1")
    q = math.exp(la0 - la2)
    c1 = {"t": (la2 - la1) / Lambda, "eta": 2.0 * q}
    c2 = {"t": -(la1 - la0 - math.log(2.0) + math.log1p(-q)) / Lambda, "eta": 0.5 + 0.5 * q}
    ok1 = c1["eta"] < 1 and c1["t"] >= 0
    pick = 1 if ok1 and c1["eta"] <= c2["eta"] else 2
    ch = c1 if pick == 1 else c2
    return FourDomainsResult(ch["t"], ch["eta"], pick, {1: c1, 2: c2})


def lemma_bound(const: AnnulusConstants, t):
    """``1 - a0/a''_-2 - (a0/a'_-1) exp(-Lambda t)``; ``nan`` when the lemma does not apply."""
    if not const.Lambda > 0 or const.log_a0 >= const.log_a2_dprime:
        return float("nan")
    return 1.0 - math.exp(const.log_a0 - const.log_a2_dprime) \
        - math.exp(const.log_a0 - const.log_a1_prime - const.Lambda * t)


# --------------------------------------------------------------------------
# dominating chain

@dataclass
class DominatingChainResult:
    expected_time: float | None
    A_K: float
    integral_bound: float
    p_target: int
    m_top: int


def dominating_chain_hitting_time(Bmax, Dmin, K, p_target, p_start=None, tail_eps=1e-12,
                                  m_top=None) -> DominatingChainResult:
    """Mean hitting time of ``p_target`` for the chain with rates ``K Bmax(m/K)``, ``K Dmin(m/K)``.

    ``E_m`` of one step down, ``e(m) = 1/M(m) + sum_{i>m} Lambda(m)..Lambda(i-1)/(M(m)..M(i))``,
    satisfies ``e(m) = (1 + Lambda(m) e(m+1)) / M(m)``; it is evaluated backward from
    ``m_top``, seeded with the locally-constant-rate value ``1/(M - Lambda)``.  Since
    ``Lambda/M <= 1/2`` the seed error halves at every step down.  The infinite sum
    over ``m > m_top`` is the integral of ``1/(K (Dmin - Bmax))``.
    """
    Lam = lambda m: K * np.asarray(Bmax(np.asarray(m, float) / K), float)
    M = lambda m: K * np.asarray(Dmin(np.asarray(m, float) / K), float)
    p_target = int(p_target)
    if p_start is not None and p_start <= p_target:
        return DominatingChainResult(0.0, float("nan"), float("nan"), p_target, p_target)
    # enough steps for the seed error (halving per step) to drop below tail_eps
    settle = int(math.ceil(-math.log2(tail_eps))) + 8
    if m_top is None:
        m_top = max(p_target + 200_000, (p_start or 0) + settle, p_target + 100 * int(K))
    ms = np.arange(p_target, m_top + 1)
    lam, mu = Lam(ms), M(ms)
    bad = (lam > 0.5 * mu) | ((mu <= 0) & (lam > 0))
    if bad.any():
        q = int(ms[np.argmax(bad)])
        raise DominationError(f"birth/death ratio exceeds 1/2 at q={q}", q)
    e = np.zeros(ms.size)
    top = mu[-1] - lam[-1]
    e[-1] = 1.0 / top
    for k in range(ms.size - 2, 0, -1):
        e[k] = (1.0 + lam[k] * e[k + 1]) / mu[k]
    tail = K * _integral_to_inf(lambda s: 1.0 / (K * (Dmin(s) - Bmax(s))), (m_top + 0.5) / K)
    A_K = float(e[1:].sum() + tail)
    expected = None
    if p_start is not None:
        expected = float(e[1:p_start - p_target + 1].sum())
    L = p_target / K
    integral = _integral_to_inf(lambda s: 1.0 / Dmin(s), L) if L > 0 else math.inf
    return DominatingChainResult(expected, A_K, 3.0 * integral, p_target, int(m_top))


def _integral_to_inf(f, a):
    """``int_a^inf f`` after the change of variable ``s = 1/v``."""
    val, _ = quad(lambda v: f(1.0 / v) / (v * v), 0.0, 1.0 / a, epsabs=0.0, epsrel=1e-11, limit=200)
    return float(val)


def envelope_functions(model, resolution=64):
    """``(Bmax, Dmin)`` on the l1 sphere of radius ``s``, as scalar/array callables."""

    def Bmax(s):
        s_arr = np.atleast_1d(np.asarray(s, float))
        out = envelopes(model, s_arr, resolution)[0]
        return out if np.ndim(s) else float(out[0])

    def Dmin(s):
        s_arr = np.atleast_1d(np.asarray(s, float))
        out = envelopes(model, s_arr, resolution)[1]
        return out if np.ndim(s) else float(out[0])

    return Bmax, Dmin
