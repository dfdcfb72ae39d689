"""Laws of the process conditioned on survival, total variation, QSD checks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import kstest, linregress

from . import _kernels as kern
from .model import find_fixed_point
from .sim import (_check_model, _raise_status, decode_states, encode_states, radix_for,
                  snapshot_batch)


class NoSurvivorsError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# laws

@dataclass
class Law:
    """Finitely supported probability law on lattice states."""

    support: np.ndarray      # (m, d) int
    mass: np.ndarray         # (m,)
    sample_size: int = 0     # 0 for exact laws
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=np.int64))
        self.mass = np.asarray(self.mass, dtype=float)
        if self.mass.shape[0] != self.support.shape[0]:
            raise ValueError("support and mass lengths differ")
        if np.any(self.mass < 0):
            raise ValueError("negative mass")
        if abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError(f"mass sums to {self.mass.sum()!r}, not 1")

    @property
    def d(self):
        return self.support.shape[1]

    @classmethod
    def point(cls, n):
        return cls(np.asarray(n)[None, :], np.ones(1))

    @classmethod
    def from_samples(cls, states, **info):
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        N = states.shape[0]
        if N == 0:
            raise ValueError("no samples")
        codes, counts = np.unique(encode_states(states, states.shape[1]), return_counts=True)
        return cls(decode_states(codes, states.shape[1]), counts / N, N, dict(info))

    @classmethod
    def from_codes(cls, codes, weights, d, sample_size=0, **info):
        order = np.argsort(codes)
        w = np.asarray(weights, float)[order]
        return cls(decode_states(np.asarray(codes)[order], d), w / w.sum(), sample_size, dict(info))

    @classmethod
    def from_qsd(cls, sol):
        return cls(sol.states, sol.nu / sol.nu.sum())

    def codes(self):
        return encode_states(self.support, self.d)

    def mass_of(self, n):
        c = encode_states(np.asarray(n)[None, :], self.d)[0]
        hit = self.codes() == c
        return float(self.mass[hit].sum())

    def sample(self, size, rng):
        idx = rng.choice(self.mass.size, size=size, p=self.mass)
        return self.support[idx]

    def to_csv(self, path, meta=None):
        from .io import write_csv

        write_csv(path, [f"n_{j + 1}" for j in range(self.d)] + ["mass"],
                  [[*s, m] for s, m in zip(self.support, self.mass)], meta)


@dataclass
class TvReport:
    tv: float
    stderr: float | None = None
    bias_bound: float | None = None
    pair: tuple = ("p", "q")


def _aligned(p: Law, q: Law):
    cp, cq = p.codes(), q.codes()
    allc = np.union1d(cp, cq)
    a = np.zeros(allc.size)
    b = np.zeros(allc.size)
    np.add.at(a, np.searchsorted(allc, cp), p.mass)
    np.add.at(b, np.searchsorted(allc, cq), q.mass)
    return allc, a, b


def _cell_se(law, N):
    return np.sqrt(law.mass * (1 - law.mass) / N).sum()


def tv_distance(p: Law, q: Law, names=("p", "q")) -> TvReport:
    """Half the l1 distance on the union of supports.

    For empirical laws the report carries a standard error, the sum of the
    per-cell binomial standard errors halved (it bounds the mean absolute
    error of the plug-in estimate), and the bias bound ``sqrt(m / N) / 2`` with
    ``m`` the support size of the exact law.
    """
    _, a, b = _aligned(p, q)
    tv = 0.5 * float(np.abs(a - b).sum())
    se = 0.0
    bias = 0.0
    empirical = False
    for law, other in ((p, q), (q, p)):
        if law.sample_size:
            empirical = True
            se += 0.5 * _cell_se(law, law.sample_size)
            m = other.mass.size if not other.sample_size else law.mass.size
            bias += 0.5 * math.sqrt(m / law.sample_size)
    if not empirical:
        return TvReport(min(tv, 1.0), None, None, names)
    return TvReport(min(tv, 1.0), float(se), float(bias), names)


# --------------------------------------------------------------------------
# conditioned laws

def _as_law(init, d):
    if isinstance(init, Law):
        return init
    return Law.point(np.asarray(init, dtype=np.int64).reshape(d))


def _initial_states(init: Law, replicas, ss):
    if init.mass.size == 1:
        return np.repeat(init.support, replicas, axis=0)
    return init.sample(replicas, np.random.default_rng(ss))


def _batch(model, K, init, times, replicas, seed, t_end=None):
    _check_model(model)
    init = _as_law(init, model.d)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    ss_init, ss_run = ss.spawn(2)
    starts = _initial_states(init, replicas, ss_init)
    times = np.atleast_1d(np.asarray(times, float))
    t_end = float(times.max()) if t_end is None else float(t_end)
    run_seed = int(ss_run.generate_state(1, dtype=np.uint64)[0])
    states, t0 = snapshot_batch(model, K, starts, times, t_end, replicas, run_seed)
    return starts, states, t0


def _conditioned(states_k, t0, t, survivors_note=""):
    alive = t0 > t
    n_alive = int(alive.sum())
    if n_alive == 0:
        raise NoSurvivorsError(f"no replica survived to t={t}; use a smaller t or more replicas"
                               + survivors_note)
    law = Law.from_samples(states_k[alive])
    law.info["survivor_fraction"] = n_alive / t0.size
    law.info["t"] = float(t)
    return law


def conditioned_law_mc(model, K, init, t, replicas, seed) -> Law:
    """Empirical law of ``N(t)`` among replicas with ``T_0 > t`` (rejection)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    _, states, t0 = _batch(model, K, init, [t], replicas, seed)
    return _conditioned(states[:, 0], t0, t)


@dataclass
class TvCurve:
    t: np.ndarray
    tv: np.ndarray
    stderr: np.ndarray
    bias_bound: np.ndarray
    survivor_fraction: np.ndarray
    decay_rate: float | None = None
    decreasing: bool | None = None

    def to_csv(self, path, meta=None):
        from .io import write_csv

        write_csv(path, ["t", "tv", "stderr"], list(zip(self.t, self.tv, self.stderr)), meta)


def tv_convergence_curve(model, K, init, t_grid, replicas, seed, qsd: Law) -> TvCurve:
    """``TV(law of N(t) | t < T_0, qsd)`` on ``t_grid`` from one replica batch."""
    t_grid = np.asarray(t_grid, float)
    _, states, t0 = _batch(model, K, init, t_grid, replicas, seed)
    tv, se, bias, surv = [], [], [], []
    for k, t in enumerate(t_grid):
        law = _conditioned(states[:, k], t0, t)
        r = tv_distance(law, qsd)
        tv.append(r.tv)
        se.append(r.stderr)
        bias.append(r.bias_bound)
        surv.append(law.info["survivor_fraction"])
    tv, se, bias = np.array(tv), np.array(se), np.array(bias)
    curve = TvCurve(t_grid, tv, se, bias, np.array(surv))
    if t_grid.size >= 2:
        curve.decreasing = bool(np.all(np.diff(tv) < 0))
        above = tv > 3 * se
        if above.sum() >= 2:
            fit = linregress(t_grid[above], np.log(tv[above]))
            curve.decay_rate = float(-fit.slope)
    return curve


# --------------------------------------------------------------------------
# mixture

def mixture_law(sol, n0, t) -> Law:
    """``w nu + (1 - w) delta_0`` with ``w = exp(-lambda0 t) min(u(n0), 1)``."""
    try:
        p = min(sol.u_at(n0), 1.0)
    except KeyError as e:
        raise ValueError(f"n0 outside the solver box: {e}") from None
    w = math.exp(-sol.lambda0 * t) * p
    d = sol.states.shape[1]
    support = np.vstack([np.zeros((1, d), dtype=np.int64), sol.states])
    mass = np.concatenate([[1.0 - w], w * sol.nu / sol.nu.sum()])
    return Law(support, mass / mass.sum(), info={"weight": w, "p": p})


def mixture_residual(model, K, n0, t, sol, replicas, seed) -> TvReport:
    """TV between the unconditioned empirical law at ``t`` and the mixture."""
    target = mixture_law(sol, n0, t)
    _, states, _ = _batch(model, K, n0, [t], replicas, seed)
    emp = Law.from_samples(states[:, 0])
    return tv_distance(emp, target, ("empirical", "mixture"))


# --------------------------------------------------------------------------
# extinction law

@dataclass
class ExtinctionTest:
    mean: float
    stderr: float
    expected_mean: float
    z: float
    ks_statistic: float
    ks_pvalue: float
    censored_fraction: float
    replicas: int
    notice: str = ""


def extinction_law_test(model, K, sol, replicas, seed, t_max=None) -> ExtinctionTest:
    """Sample ``T_0`` from the QSD and compare with ``Exponential(lambda0)``."""
    lam = sol.lambda0
    t_max = 50.0 / lam if t_max is None else t_max
    _, _, t0 = _batch(model, K, Law.from_qsd(sol), [], replicas, seed, t_end=t_max)
    cens = ~np.isfinite(t0)
    frac = float(cens.mean())
    if cens.all():
        raise ValueError(f"every replica was censored at t_max={t_max:g}; enlarge t_max")
    notice = ""
    if frac > 1e-3:
        notice = f"censoring {frac:.3%} at t_max={t_max:g}; enlarge t_max"
        warnings.warn(notice)
    x = t0[~cens]
    ks = kstest(x, "expon", args=(0.0, 1.0 / lam))
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(x.size))
    return ExtinctionTest(m, se, 1.0 / lam, (m - 1.0 / lam) / se, float(ks.statistic),
                          float(ks.pvalue), frac, int(replicas), notice)


# --------------------------------------------------------------------------
# (A1) / (A2)

@dataclass
class A1A2Report:
    c1_hat: float
    c2_hat: float
    t0: float
    delta_size: int
    per_probe: list
    dropped: list
    witness_c1: tuple | None = None
    witness_c2: tuple | None = None


def default_probes(model, K, box, n_star):
    d = model.d
    probes = [tuple(int(v) for v in n_star)]
    probes += [tuple(int(v) for v in np.eye(d, dtype=int)[j]) for j in range(d)]
    probes.append(tuple(int(b) for b in box))
    for j in range(d):
        far = np.ones(d, dtype=int)
        far[j] = box[j]
        probes.append(tuple(int(v) for v in far))
    return list(dict.fromkeys(probes))


def check_A1_A2(model, K, sol, t0, replicas, seed, rho=1.0, delta_states=None, probes=None,
                t_grid=None) -> A1A2Report:
    """Empirical constants in the two conditions on the uniform law on the target set.

    ``c1`` is the largest constant with ``P_n(N(t0) in . | t0 < T_0) >= c1 nu_Delta``
    on every probe; ``c2`` the largest with ``P_Delta(t < T_0) >= c2 P_n(t < T_0)``
    over probes and ``t_grid``.
    """
    gen = sol.generator
    if delta_states is None:
        x_star = find_fixed_point(model).x_star
        n_star = np.floor(K * x_star + 1e-9)
        z = gen.states - n_star
        delta_states = gen.states[np.einsum("ij,ij->i", z, z) <= (2 * rho) ** 2 * K]
    else:
        n_star = None
    delta_states = np.atleast_2d(np.asarray(delta_states, dtype=np.int64))
    m = delta_states.shape[0]
    if m == 0:
        raise ValueError("empty target set")
    if probes is None:
        ns = n_star if n_star is not None else delta_states[0]
        probes = default_probes(model, K, gen.box, ns)
    t_grid = np.linspace(0.0, 5.0 * max(t0, 1.0), 11) if t_grid is None else np.asarray(t_grid)
    t_end = float(max(t_grid.max(), t0))
    delta_law = Law(delta_states, np.full(m, 1.0 / m))
    seeds = np.random.SeedSequence(seed).spawn(len(probes) + 1)
    _, _, t0_delta = _batch(model, K, delta_law, [t0], replicas, seeds[0], t_end=t_end)
    surv_delta = np.array([(t0_delta > t).mean() for t in t_grid])
    dcodes = encode_states(delta_states, model.d)
    per, dropped = [], []
    c1, c2 = math.inf, math.inf
    w1 = w2 = None
    for probe, ss in zip(probes, seeds[1:]):
        _, states, tt = _batch(model, K, probe, [t0], replicas, ss, t_end=t_end)
        alive = tt > t0
        if not alive.any():
            dropped.append(probe)
            continue
        law = Law.from_samples(states[alive, 0])
        lc = law.codes()
        pos = np.searchsorted(lc, dcodes)
        pos = np.minimum(pos, lc.size - 1)
        got = np.where(lc[pos] == dcodes, law.mass[pos], 0.0)
        c1_n = float(m * got.min())
        surv_n = np.array([(tt > t).mean() for t in t_grid])
        ok = surv_n > 0
        c2_n = float(np.min(surv_delta[ok] / surv_n[ok]))
        per.append({"probe": probe, "c1": c1_n, "c2": c2_n, "survivors": int(alive.sum())})
        if c1_n < c1:
            c1, w1 = c1_n, probe
        if c2_n < c2:
            c2, w2 = c2_n, probe
    return A1A2Report(float(c1), float(c2), float(t0), m, per, dropped, w1, w2)


# --------------------------------------------------------------------------
# Fleming-Viot

def fleming_viot_qsd(model, K, particles, t_max, seed, init=None) -> Law:
    """Time-averaged particle law over ``[t_max/2, t_max]``."""
    _check_model(model)
    if particles < 2:
        raise ValueError("need at least two particles")
    d = model.d
    if init is None:
        fp = find_fixed_point(model)
        n0 = np.floor(K * fp.x_star + 1e-9).astype(np.int64) if fp.converged else np.ones(d, np.int64)
        if not n0.any():
            n0 = np.ones(d, np.int64)
        init = np.repeat(n0[None, :], particles, axis=0)
    init = np.ascontiguousarray(np.asarray(init, dtype=np.int64))
    run_seed = int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint64)[0])
    codes, w, restarts, status = kern.fleming_viot(*model.kernel_arrays(), float(K), init,
                                                   float(t_max), np.uint64(run_seed),
                                                   radix_for(d), int(10**10))
    _raise_status(status)
    return Law.from_codes(codes, w, d, sample_size=0, restarts=int(restarts),
                          particles=int(particles), t_max=float(t_max))
