"""Detailed balance on the lattice: plaquette criterion and reversible measures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .model import Model


class ReversibilityError(RuntimeError):
    pass


@dataclass
class Rates:
    """Per-direction rates ``lam(j, states)`` and ``mu(j, states)`` on ``(N, d)`` arrays."""

    d: int
    lam: object
    mu: object
    name: str = "rates"


def model_rates(model: Model, K) -> Rates:
    if not isinstance(model, Model):
        raise TypeError("reversibility checks need a polynomial Model")

    def lam(j, X):
        return K * model.birth(np.asarray(X, float) / K)[:, j]

    def mu(j, X):
        return K * model.death(np.asarray(X, float) / K)[:, j]

    return Rates(model.d, lam, mu, getattr(model, "name", "model"))


def case2_rates(lam1, lam2, mu1, mu2, c) -> Rates:
    """Two competing populations: ``lam_k n_k`` and ``n_k (mu_k + c_k1 n_1 + c_k2 n_2)``."""
    c = np.asarray(c, float)
    lams = (lam1, lam2)
    mus = (mu1, mu2)

    def lam(j, X):
        X = np.asarray(X, float)
        return lams[j] * X[:, j]

    def mu(j, X):
        X = np.asarray(X, float)
        return X[:, j] * (mus[j] + c[j, 0] * X[:, 0] + c[j, 1] * X[:, 1])

    return Rates(2, lam, mu, "case2")


def _grid(box):
    box = tuple(int(b) for b in box)
    g = np.meshgrid(*[np.arange(b + 1) for b in box], indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


@dataclass
class CircuitReport:
    reversible: bool
    worst_plaquette: tuple | None
    worst_log_deviation: float
    audited: int
    skipped: int
    exclusions: list = field(default_factory=list)
    pi: object = None

    def to_dict(self):
        return {"reversible": self.reversible, "worst_plaquette": self.worst_plaquette,
                "worst_log_deviation": self.worst_log_deviation, "audited": self.audited,
                "skipped": self.skipped, "exclusions_present": bool(self.exclusions),
                "exclusions": self.exclusions[:1000]}


def plaquette_log_products(rates: Rates, box):
    """``(bases, i, j, log_product, ok)`` for every unit square in the box."""
    d = rates.d
    X = _grid(box)
    out = []
    box = np.asarray(box)
    for i, j in combinations(range(d), 2):
        ei = np.zeros(d, dtype=np.int64)
        ej = np.zeros(d, dtype=np.int64)
        ei[i] = 1
        ej[j] = 1
        B = X[(X[:, i] < box[i]) & (X[:, j] < box[j])]
        # forward n -> n+ei -> n+ei+ej -> n+ej -> n
        num = [rates.lam(i, B), rates.lam(j, B + ei), rates.mu(i, B + ei + ej), rates.mu(j, B + ej)]
        den = [rates.mu(i, B + ei), rates.mu(j, B + ei + ej), rates.lam(i, B + ej), rates.lam(j, B)]
        ok = B.any(axis=1)
        for v in num + den:
            ok &= v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            s = sum(np.log(v) for v in num) - sum(np.log(v) for v in den)
        out.append((B, i, j, np.where(ok, s, np.nan), ok))
    return out


def circuit_criterion(rates: Rates, box, tol=1e-9) -> CircuitReport:
    """Reversible iff every audited plaquette has ``|sum log rho| <= tol``.

    Plaquettes touching the origin or a vanishing rate are skipped and listed.
    """
    if isinstance(rates, Model):
        raise TypeError("pass Rates (see model_rates)")
    if rates.d == 1:
        return CircuitReport(True, None, 0.0, 0, 0, [])
    worst, worst_dev = None, 0.0
    audited = skipped = 0
    excl = []
    for B, i, j, s, ok in plaquette_log_products(rates, box):
        audited += int(ok.sum())
        skipped += int((~ok).sum())
        excl.extend((tuple(int(v) for v in b), i, j) for b in B[~ok])
        if ok.any():
            dev = np.abs(s[ok])
            k = int(np.argmax(dev))
            if dev[k] >= worst_dev:
                worst_dev = float(dev[k])
                worst = (tuple(int(v) for v in B[ok][k]), i, j)
    return CircuitReport(bool(worst_dev <= tol), worst, worst_dev, audited, skipped, excl)


def circuit_log_product(rates: Rates, path):
    """``sum log rho`` along a closed nearest-neighbour lattice path."""
    path = np.asarray(path, dtype=np.int64)
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        step = b - a
        j = int(np.flatnonzero(step)[0])
        if step[j] == 1:
            total += math.log(rates.lam(j, a[None])[0]) - math.log(rates.mu(j, b[None])[0])
        else:
            total += math.log(rates.mu(j, a[None])[0]) - math.log(rates.lam(j, b[None])[0])
    return total


@dataclass
class ReversibleMeasure:
    box: tuple
    base: tuple
    axis_order: tuple
    log_pi: np.ndarray          # box-shaped, nan where undefined
    max_edge_error: float
    excluded: list

    def states(self):
        X = _grid(self.box)
        v = self.log_pi.ravel()
        keep = np.isfinite(v)
        return X[keep], v[keep]

    def to_csv(self, path, meta=None):
        from .io import write_csv

        X, v = self.states()
        d = X.shape[1]
        write_csv(path, [f"n_{j + 1}" for j in range(d)] + ["log_pi"],
                  [[*s, w] for s, w in zip(X, v)], meta)


def _log_ratio(rates, a, X):
    """``log lam_a(n) - log mu_a(n + e_a)``; nan when an edge rate vanishes."""
    e = np.zeros(X.shape[1], dtype=np.int64)
    e[a] = 1
    lam = rates.lam(a, X)
    mu = rates.mu(a, X + e)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.log(lam) - np.log(mu)
    return np.where((lam > 0) & (mu > 0), r, np.nan)


def construct_reversible_measure(rates: Rates, box, base=None, axis_order=None,
                                 tol=1e-12) -> ReversibleMeasure:
    """``log pi`` with ``log pi(base) = 0``, built along axis-ordered paths from ``base``.

    Each state is reached by moving along ``axis_order[0]`` first, then
    ``axis_order[1]`` and so on.  States whose path crosses a vanishing rate
    are left undefined and listed.  Every positive-rate edge between defined
    states is then checked against detailed balance.
    """
    d = rates.d
    box = tuple(int(b) for b in box)
    base = tuple(1 for _ in range(d)) if base is None else tuple(int(v) for v in base)
    order = tuple(range(d)) if axis_order is None else tuple(axis_order)
    shape = tuple(b + 1 for b in box)
    X = _grid(box).reshape(*shape, d)
    L = np.full(shape, np.nan)
    L[base] = 0.0
    for a in order:
        for m in range(base[a], box[a]):
            src = [slice(None)] * d
            dst = [slice(None)] * d
            src[a], dst[a] = m, m + 1
            pts = X[tuple(src)].reshape(-1, d)
            inc = _log_ratio(rates, a, pts).reshape(L[tuple(src)].shape)
            L[tuple(dst)] = L[tuple(src)] + inc
        for m in range(base[a], 0, -1):
            src = [slice(None)] * d
            dst = [slice(None)] * d
            src[a], dst[a] = m, m - 1
            pts = X[tuple(dst)].reshape(-1, d)
            inc = _log_ratio(rates, a, pts).reshape(L[tuple(dst)].shape)
            L[tuple(dst)] = L[tuple(src)] - inc
    L[(0,) * d] = np.nan
    excluded = [tuple(int(v) for v in s) for s in X.reshape(-1, d)[~np.isfinite(L.ravel())]
                if s.any()]
    # detailed-balance sweep
    worst = 0.0
    flat = L.ravel()
    Xf = X.reshape(-1, d)
    for a in range(d):
        m = Xf[:, a] < box[a]
        P = Xf[m]
        e = np.zeros(d, dtype=np.int64)
        e[a] = 1
        lhs = flat[np.ravel_multi_index(tuple((P + e).T), shape)] - flat[m]
        rhs = _log_ratio(rates, a, P)
        good = np.isfinite(lhs) & np.isfinite(rhs)
        if good.any():
            err = np.abs(lhs[good] - rhs[good])
            k = int(np.argmax(err))
            if err[k] > tol * max(1.0, abs(rhs[good][k])):
                n = tuple(int(v) for v in P[good][k])
                raise ReversibilityError(
                    f"detailed balance fails on edge {n} -> +e_{a + 1}: the axis-ordered path "
                    f"{order} gives a log-increment {float(lhs[good][k])!r}, the edge itself {float(rhs[good][k])!r}")
            worst = max(worst, float(err[k]))
    return ReversibleMeasure(box, base, order, L, worst, excluded)


def _eq(a, b, rtol=1e-12):
    return abs(a - b) <= rtol * max(abs(a), abs(b))


def case2_closed_form_check(lam1, lam2, mu1, mu2, c, rtol=1e-12):
    """The three equalities that characterise reversibility of the two-type model."""
    c = np.asarray(c, float)
    if c[0, 1] == 0 or c[1, 0] == 0:
        return {"applicable": False, "reversible": None, "violated": [],
                "reason": "c12 or c21 is zero: no inter-specific interaction"}
    violated = []
    if not _eq(c[0, 0], c[0, 1], rtol):
        violated.append("c11=c12")
    if not _eq(c[1, 0], c[1, 1], rtol):
        violated.append("c21=c22")
    if not _eq(mu1 * c[1, 0], mu2 * c[0, 1], rtol):
        violated.append("mu1*c21=mu2*c12")
    return {"applicable": True, "reversible": not violated, "violated": violated}
