"""Truncated killed generator and the quasi-stationary eigen-triple.

States of the box ``{0..b_1} x ... x {0..b_d}`` minus the origin are indexed
lexicographically (last coordinate fastest), so that index ``i`` is the
row-major rank of the state minus one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.stats import linregress

from .model import ModelError, find_fixed_point


class StructuralError(RuntimeError):
    """Reducible chain or an eigenvector that is not positive."""


class QsdConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass
class KilledGenerator:
    box: tuple
    states: np.ndarray          # (S, d), lexicographic
    Q: sp.csr_matrix
    kill_to_zero: np.ndarray    # rate into the origin
    kill_out: np.ndarray        # rate out of the box (kill policy only)
    boundary_policy: str
    K: float = float("nan")

    @property
    def size(self):
        return self.states.shape[0]

    @property
    def kill(self):
        return self.kill_to_zero + self.kill_out

    def index(self, n):
        n = np.asarray(n, dtype=np.int64)
        if n.shape != (len(self.box),) or np.any(n < 0) or np.any(n > np.asarray(self.box)):
            raise KeyError(f"state {tuple(n)} outside the box {self.box}")
        if not n.any():
            raise KeyError("the origin is not an indexed state")
        return int(np.ravel_multi_index(tuple(n), tuple(b + 1 for b in self.box))) - 1

    def off_diagonal(self):
        """Off-diagonal part as COO triples ``(rows, cols, rates)``."""
        Qc = self.Q.tocoo()
        m = Qc.row != Qc.col
        return Qc.row[m], Qc.col[m], Qc.data[m]


def box_states(box):
    box = tuple(int(b) for b in box)
    grids = np.meshgrid(*[np.arange(b + 1) for b in box], indexing="ij")
    states = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    return states[1:]


def default_box(model, K, x_star=None):
    """Per-axis bound ``ceil(4 K x*_j)`` with a floor of 20."""
    if x_star is None:
        fp = find_fixed_point(model)
        if not fp.converged:
            raise ModelError("no interior fixed point to size the box")
        x_star = fp.x_star
    return tuple(max(20, int(math.ceil(4 * K * xj - 1e-9))) for xj in x_star)


def build_killed_generator(model, K, box, boundary_policy="reflect") -> KilledGenerator:
    """Sub-Markovian rate matrix on the box minus the origin.

    Deaths landing on the origin become killing.  Births leaving the box are
    suppressed (``reflect``) or turned into killing (``kill``).
    """
    if boundary_policy not in ("reflect", "kill"):
        raise ValueError("boundary_policy must be 'reflect' or 'kill'")
    box = tuple(int(b) for b in np.atleast_1d(box))
    if len(box) != model.d:
        raise ValueError(f"box needs {model.d} bounds")
    if min(box) < 1:
        raise ValueError(f"box {box} leaves an axis without a non-zero state")
    states = box_states(box)
    S, d = states.shape
    birth, death = model.rates(states, K)
    for arr, what in ((birth, "birth"), (death, "death")):
        if not np.all(np.isfinite(arr)):
            i = np.argwhere(~np.isfinite(arr))[0, 0]
            raise ModelError(f"non-finite {what} rate", witness=tuple(states[i]))
        if np.any(arr < 0):
            i = np.argwhere(arr < 0)[0, 0]
            raise ModelError(f"negative {what} rate {arr[i].min()}", witness=tuple(states[i]))
    bad = (states == 0) & (death > 0)
    if bad.any():
        i = np.argwhere(bad)[0, 0]
        raise ModelError("death rate positive on an empty coordinate", witness=tuple(states[i]))

    shape = tuple(b + 1 for b in box)
    rows, cols, vals = [], [], []
    kill0 = np.zeros(S)
    kout = np.zeros(S)
    idx = np.arange(S)
    for j in range(d):
        up = states.copy()
        up[:, j] += 1
        inside = up[:, j] <= box[j]
        m = inside & (birth[:, j] > 0)
        rows.append(idx[m])
        cols.append(np.ravel_multi_index(tuple(up[m].T), shape) - 1)
        vals.append(birth[m, j])
        if boundary_policy == "kill":
            kout += np.where(~inside, birth[:, j], 0.0)
        down = states.copy()
        down[:, j] -= 1
        m = death[:, j] > 0
        to_zero = m & ~down.any(axis=1)
        kill0 += np.where(to_zero, death[:, j], 0.0)
        m &= ~to_zero
        rows.append(idx[m])
        cols.append(np.ravel_multi_index(tuple(down[m].T), shape) - 1)
        vals.append(death[m, j])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    off = sp.csr_matrix((v, (r, c)), shape=(S, S))
    diag = -(np.asarray(off.sum(axis=1)).ravel() + kill0 + kout)
    Q = (off + sp.diags(diag)).tocsr()
    Q.sort_indices()
    return KilledGenerator(box, states, Q, kill0, kout, boundary_policy, float(K))


def generator_from_matrix(Q) -> KilledGenerator:
    """Wrap a bare sub-Markovian matrix (one-dimensional indexing ``1..S``)."""
    Q = sp.csr_matrix(np.asarray(Q.todense() if sp.issparse(Q) else Q, dtype=float))
    S = Q.shape[0]
    rowsum = np.asarray(Q.sum(axis=1)).ravel()
    if np.any(rowsum > 1e-12 * np.abs(Q.diagonal()).max()):
        raise ValueError("rows of a killed generator must sum to at most 0")
    states = np.arange(1, S + 1, dtype=np.int64)[:, None]
    return KilledGenerator((S,), states, Q, -np.minimum(rowsum, 0.0), np.zeros(S), "reflect")


# --------------------------------------------------------------------------
# QSD

@dataclass
class QsdSolution:
    nu: np.ndarray
    lambda0: float
    u: np.ndarray
    residuals: tuple
    iterations: int
    generator: KilledGenerator | None = None
    lambda0_left: float = float("nan")
    lambda0_right: float = float("nan")

    @property
    def states(self):
        return self.generator.states

    def nu_at(self, n):
        return float(self.nu[self.generator.index(n)])

    def u_at(self, n):
        return float(self.u[self.generator.index(n)])

    def to_csv(self, path, meta=None):
        from .io import write_csv

        d = self.states.shape[1]
        write_csv(path, [f"n_{j + 1}" for j in range(d)] + ["nu", "u"],
                  [[*s, a, b] for s, a, b in zip(self.states, self.nu, self.u)], meta)


def check_irreducible(gen: KilledGenerator):
    n, labels = connected_components(gen.Q, directed=True, connection="strong")
    if n != 1:
        sizes = np.bincount(labels)
        raise StructuralError(f"restricted chain is reducible: {n} communicating classes "
                              f"(sizes {sorted(sizes.tolist(), reverse=True)[:5]})")


def _apply_diff(gen, u, rows, cols, rates):
    """``Q u`` written as ``sum_j r_ij (u_j - u_i) - kill_i u_i`` (no cancellation)."""
    out = np.zeros_like(u)
    np.add.at(out, rows, rates * (u[cols] - u[rows]))
    return out - gen.kill * u


def solve_qsd(gen, tol=1e-10, max_iter=1_000_000, check_every=20) -> QsdSolution:
    """Left and right Perron vectors of the killed generator by shifted power iteration.

    ``lambda0`` is the two-sided Rayleigh quotient ``-(nu Q u)/(nu u)``; it is
    checked against the flux estimate ``sum_i nu_i kill_i``, which differs from
    the true rate by at most the left residual.  Iteration stops once both
    residuals are below ``tol`` and the two estimates agree to that accuracy.
    """
    if not isinstance(gen, KilledGenerator):
        gen = generator_from_matrix(gen)
    Q = gen.Q
    S = gen.size
    if S == 1:
        lam = -float(Q[0, 0])
        if lam <= 0:
            raise StructuralError("single state without killing")
        return QsdSolution(np.ones(1), lam, np.ones(1), (0.0, 0.0), 0, gen, lam, lam)
    check_irreducible(gen)
    rows, cols, rates = gen.off_diagonal()
    kill = gen.kill
    if not np.any(kill > 0):
        raise StructuralError("no killing: the truncated chain never reaches the origin")
    sigma = float(np.abs(Q.diagonal()).max()) + 1.0
    A = (Q + sigma * sp.identity(S, format="csr")).tocsr()
    AT = A.T.tocsr()
    u = np.ones(S) / S
    nu = np.ones(S) / S
    best = (math.inf, None)
    it = 0
    while it < max_iter:
        for _ in range(check_every):
            u = A @ u
            u /= np.abs(u).max()
            nu = AT @ nu
            nu /= nu.sum()
        it += check_every
        lam_left = float(nu @ kill)
        Qu = _apply_diff(gen, u, rows, cols, rates)
        lam = -float(nu @ Qu) / float(nu @ u)
        res_right = float(np.abs(Qu + lam * u).max() / np.abs(u).max())
        res_left = float(np.abs(Q.T @ nu + lam * nu).sum())
        res = max(res_left, res_right)
        agree = abs(lam - lam_left) <= res_left + 1e-9 * abs(lam)
        if res < best[0]:
            best = (res, (nu.copy(), u.copy(), lam, lam_left, res_left, res_right, it))
        if res <= tol and agree:
            break
    res, payload = best
    if payload is None or res > tol:
        raise QsdConvergenceError(f"power iteration did not reach tol={tol:g} in {max_iter} "
                                  f"iterations (best residual {res:.3g})", res)
    nu, u, lam, lam_left, res_left, res_right, it = payload
    if abs(lam - lam_left) > res_left + 1e-8 * abs(lam):
        raise QsdConvergenceError(f"left/right extinction rates disagree: {lam_left!r} vs {lam!r}",
                                  res)
    # irreducibility was checked on the graph; exact zeros here are underflow far from n*
    if nu.min() < 0 or u.min() < 0:
        raise StructuralError("negative eigenvector entry")
    nu = nu / nu.sum()
    u = u / float(nu @ u)
    return QsdSolution(nu, lam, u, (res_left, res_right), it, gen, lam_left, lam)


def mean_extinction_from_qsd(sol) -> float:
    lam = sol.lambda0 if hasattr(sol, "lambda0") else float(sol)
    return 1.0 / lam


# --------------------------------------------------------------------------
# spectral gap

@dataclass
class GapEstimate:
    eigenvalues: np.ndarray     # leading eigenvalues of Q, real part descending
    lambda0: float
    lambda1: complex | None
    gap: float | None
    method: str


def spectral_gap_estimate(gen, k=2, dense_limit=2500, tol=1e-10, max_iter=1_000_000) -> GapEstimate:
    """Leading eigenvalues of the killed generator and ``gap = Re(lambda1) - lambda0``."""
    if not isinstance(gen, KilledGenerator):
        gen = generator_from_matrix(gen)
    S = gen.size
    if S <= dense_limit:
        ev = np.linalg.eigvals(gen.Q.toarray())
        ev = ev[np.argsort(-ev.real, kind="stable")][:k]
        lam0 = -float(ev[0].real)
        if ev.size < 2:
            return GapEstimate(ev, lam0, None, None, "dense")
        lam1 = -ev[1]
        lam1 = complex(lam1) if abs(lam1.imag) > 0 else float(lam1.real)
        return GapEstimate(ev, lam0, lam1, float(np.real(lam1)) - lam0, "dense")
    if k != 2:
        raise ValueError("beyond the dense budget only k=2 is available")
    sol = solve_qsd(gen, tol=tol, max_iter=max_iter)
    sigma = float(np.abs(gen.Q.diagonal()).max()) + 1.0
    A = (gen.Q + sigma * sp.identity(S, format="csr")).tocsr()
    u, nu = sol.u, sol.nu
    rng = np.random.default_rng(0)
    v = rng.standard_normal(S)
    prev = None
    mu = 0.0
    for it in range(max_iter):
        v = v - u * (nu @ v)       # nu(u) = 1, so this projects out the top mode
        w = A @ v
        mu = float(np.linalg.norm(w) / np.linalg.norm(v))
        v = w / np.linalg.norm(w)
        if prev is not None and abs(mu - prev) <= tol * sigma:
            break
        prev = mu
    lam1 = sigma - mu
    ev = np.array([-sol.lambda0, -lam1])
    return GapEstimate(ev, sol.lambda0, lam1, lam1 - sol.lambda0, "deflated-power")


# --------------------------------------------------------------------------
# scaling table

@dataclass
class ScalingResult:
    Ks: list
    lambda0: list
    dropped: list = field(default_factory=list)
    slope: float | None = None
    intercept: float | None = None
    r2: float | None = None
    slope_negative: bool | None = None
    solutions: dict = field(default_factory=dict)

    def rows(self):
        return [[K, l, math.log(l)] for K, l in zip(self.Ks, self.lambda0)]

    def to_csv(self, path, meta=None):
        from .io import write_csv

        write_csv(path, ["K", "lambda0", "log_lambda0"], self.rows(), meta)


def lambda0_scaling(model, Ks, box_rule=None, boundary_policy="reflect", tol=1e-10,
                    max_iter=1_000_000, keep=False) -> ScalingResult:
    """``lambda0(K)`` per K plus the line fit of ``log lambda0`` against ``K``.

    ``box_rule`` maps ``K`` to a box; default ``ceil(4 K x*)`` floored at 20.
    """
    fp = find_fixed_point(model)
    rule = box_rule or (lambda K: default_box(model, K, fp.x_star))
    out = ScalingResult([], [])
    for K in Ks:
        sol = solve_qsd(build_killed_generator(model, K, rule(K), boundary_policy), tol, max_iter)
        if not sol.lambda0 >= 1e-300:
            warnings.warn(f"K={K}: lambda0 below 1e-300, dropped")
            out.dropped.append(K)
            continue
        out.Ks.append(K)
        out.lambda0.append(sol.lambda0)
        if keep:
            out.solutions[K] = sol
    if len(out.Ks) >= 2:
        fit = linregress(np.asarray(out.Ks, float), np.log(out.lambda0))
        out.slope, out.intercept = float(fit.slope), float(fit.intercept)
        out.r2 = float(fit.rvalue ** 2)
        out.slope_negative = out.slope < 0
    return out
