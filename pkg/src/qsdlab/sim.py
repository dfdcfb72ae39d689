"""Exact event-driven simulation, hitting times and descent experiments."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba.core.errors import NumbaWarning
from scipy.stats import linregress

from . import _kernels as kern
from .model import ModelError, Model, lattice_fixed_point

warnings.filterwarnings("ignore", message=".*TBB.*", category=NumbaWarning)

MAX_EVENTS = 10**9


class SimulationError(RuntimeError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


_STATUS_TEXT = {
    kern.NONFINITE: "non-finite rate",
    kern.NEGATIVE: "negative rate",
    kern.BUDGET: "event budget exhausted",
    kern.BOUNDARY: "death rate positive on an empty coordinate",
}


def radix_for(d):
    return np.int64(1) << np.int64(62 // d)


def encode_states(states, d):
    """Mixed-radix integer codes (first coordinate least significant)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    r = int(radix_for(d))
    codes = np.zeros(states.shape[0], dtype=np.int64)
    for l in range(d - 1, -1, -1):
        codes = codes * r + states[:, l]
    return codes


def decode_states(codes, d):
    r = int(radix_for(d))
    codes = np.asarray(codes, dtype=np.int64).copy()
    out = np.empty((codes.size, d), dtype=np.int64)
    for l in range(d):
        out[:, l] = codes % r
        codes //= r
    return out


# --------------------------------------------------------------------------
# regions

_EMPTY_CODES = np.empty(0, dtype=np.int64)


class Region:
    """Target set for hitting times; ``encode`` feeds the compiled kernels."""

    def encode(self, d):
        raise NotImplementedError

    def contains(self, n):
        raise NotImplementedError


@dataclass(frozen=True)
class Origin(Region):
    def encode(self, d):
        return kern.R_ORIGIN, np.zeros(d), 0.0, 0.0, _EMPTY_CODES

    def contains(self, n):
        return not np.any(np.asarray(n))


@dataclass(frozen=True)
class Never(Region):
    def encode(self, d):
        return kern.R_NEVER, np.zeros(d), 0.0, 0.0, _EMPTY_CODES

    def contains(self, n):
        return False


@dataclass(frozen=True)
class Ball(Region):
    """Closed Euclidean ball ``||n - center|| <= radius``."""

    center: tuple
    radius: float

    def encode(self, d):
        return kern.R_BALL, np.asarray(self.center, float), float(self.radius), 0.0, _EMPTY_CODES

    def contains(self, n):
        z = np.asarray(n, float) - np.asarray(self.center, float)
        return float(z @ z) <= self.radius ** 2


@dataclass(frozen=True)
class Outside(Region):
    """Complement of the closed ball ``||n - center|| <= radius``."""

    center: tuple
    radius: float

    def encode(self, d):
        return kern.R_OUTSIDE, np.asarray(self.center, float), float(self.radius), 0.0, _EMPTY_CODES

    def contains(self, n):
        z = np.asarray(n, float) - np.asarray(self.center, float)
        return float(z @ z) > self.radius ** 2


@dataclass(frozen=True)
class Annulus(Region):
    """``r_in < ||n - center|| <= r_out``."""

    center: tuple
    r_in: float
    r_out: float

    def encode(self, d):
        return (kern.R_ANNULUS, np.asarray(self.center, float), float(self.r_out),
                float(self.r_in), _EMPTY_CODES)

    def contains(self, n):
        z = np.asarray(n, float) - np.asarray(self.center, float)
        s = float(z @ z)
        return self.r_in ** 2 < s <= self.r_out ** 2


class StateSet(Region):
    """Explicit finite set of lattice states."""

    def __init__(self, states):
        self.states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        self._codes = np.unique(encode_states(self.states, self.states.shape[1]))

    def encode(self, d):
        return kern.R_CODES, np.zeros(d), 0.0, 0.0, self._codes

    def contains(self, n):
        c = encode_states(np.asarray(n)[None, :], self.states.shape[1])[0]
        i = np.searchsorted(self._codes, c)
        return bool(i < self._codes.size and self._codes[i] == c)


# --------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    terminal_reason: str  # "t_max" | "absorbed" | "target" | "budget"

    def state_at(self, t):
        """Last state at or before ``t`` (paths are right-continuous)."""
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.states[max(k, 0)]

    def to_csv(self, path, meta=None):
        from .io import write_csv

        d = self.states.shape[1]
        header = ["t"] + [f"n_{j + 1}" for j in range(d)]
        rows = [[t, *s] for t, s in zip(self.times, self.states)]
        write_csv(path, header, rows, meta)


def _check_model(model):
    if not isinstance(model, Model):
        raise ModelError("the compiled simulator needs a polynomial Model")


def _raise_status(status, witness=None):
    if status != kern.OK:
        raise SimulationError(_STATUS_TEXT.get(int(status), f"status {status}"), witness)


def simulate(model, K, n0, t_max, seed, target: Region | None = None, stream=0,
             max_events=MAX_EVENTS) -> Trajectory:
    """Direct-method path from ``n0`` up to ``t_max``, absorption or ``target``."""
    _check_model(model)
    n0 = np.asarray(n0, dtype=np.int64)
    if n0.shape != (model.d,) or np.any(n0 < 0):
        raise ModelError("n0 must be a non-negative lattice point of the model dimension")
    target = target or Never()
    kind, c, r, rin, codes = target.encode(model.d)
    times, states, reason, status = kern.trajectory(
        *model.kernel_arrays(), float(K), n0, float(t_max), np.uint64(seed), np.uint64(stream),
        int(max_events), kind, c, r, rin, codes, radix_for(model.d))
    _raise_status(status, tuple(int(v) for v in states[-1]))
    return Trajectory(times, states, ["t_max", "absorbed", "target", "budget"][reason])


@dataclass
class ReplicaBatch:
    """Per-replica outcome of a batch run; ``event`` uses the kernel codes."""

    seed: int
    K: float
    event: np.ndarray
    time: np.ndarray
    final: np.ndarray
    labels: tuple = ("censored", "hit", "avoid", "absorbed")

    @property
    def replicas(self):
        return self.event.size

    @property
    def censored(self):
        return self.event == kern.CENSORED

    def to_csv(self, path, meta=None):
        from .io import write_csv

        rows = [[i, self.seed, self.K, self.labels[e], t, int(e == kern.CENSORED)]
                for i, (e, t) in enumerate(zip(self.event, self.time))]
        write_csv(path, ["replica", "seed", "K", "event", "time", "censored"], rows, meta)


def _init_array(init, replicas, d):
    init = np.asarray(init, dtype=np.int64)
    if init.ndim == 1:
        init = np.repeat(init[None, :], replicas, axis=0)
    if init.shape != (replicas, d):
        raise ValueError("init must be one state or one state per replica")
    return np.ascontiguousarray(init)


def hitting_batch(model, K, init, target: Region, t_max, replicas, seed,
                  avoid: Region | None = None, stream0=0, max_events=MAX_EVENTS) -> ReplicaBatch:
    """First entrance into ``target`` (event 1) or ``avoid`` (event 2)."""
    _check_model(model)
    d = model.d
    init = _init_array(init, replicas, d)
    ka = target.encode(d)
    kb = (avoid or Never()).encode(d)
    ev, t, final, status = kern.batch_hitting(
        *model.kernel_arrays(), float(K), init, float(t_max), np.uint64(seed), np.uint64(stream0),
        int(max_events), *ka, *kb, radix_for(d))
    bad = np.flatnonzero(status)
    if bad.size:
        i = bad[0]
        _raise_status(status[i], tuple(int(v) for v in final[i]))
    return ReplicaBatch(int(seed), float(K), ev, t, final)


def hitting_time(model, K, n0, target: Region, t_max, seed):
    """``(time, censored)`` for one replica; time is 0 when ``n0`` is in the target."""
    b = hitting_batch(model, K, n0, target, t_max, 1, seed)
    if b.event[0] == kern.HIT_A:
        return float(b.time[0]), False
    if b.event[0] == kern.ABSORBED and not isinstance(target, Origin):
        return math.inf, False
    return math.inf, True


def snapshot_batch(model, K, init, obs_times, t_end, replicas, seed, stream0=0,
                   max_events=MAX_EVENTS):
    """States at ``obs_times`` and extinction times for a replica batch."""
    _check_model(model)
    init = _init_array(init, replicas, model.d)
    obs = np.asarray(obs_times, dtype=float)
    order = np.argsort(obs, kind="stable")
    if obs.size and (obs.min() < 0 or obs.max() > t_end):
        raise ValueError("observation times must lie in [0, t_end]")
    out, t0, status = kern.batch_snapshot(
        *model.kernel_arrays(), float(K), init, np.ascontiguousarray(obs[order]), float(t_end),
        np.uint64(seed), np.uint64(stream0), int(max_events))
    bad = np.flatnonzero(status)
    if bad.size:
        _raise_status(status[bad[0]], tuple(int(v) for v in init[bad[0]]))
    res = np.empty_like(out)
    res[:, order] = out
    return res, t0


def first_jump_sample(model, K, n, samples, seed):
    """Holding times and jump labels (``j`` birth, ``d + j`` death) from a frozen state."""
    _check_model(model)
    hold, ev, st = kern.first_jumps(*model.kernel_arrays(), float(K),
                                    np.asarray(n, dtype=np.int64), int(samples),
                                    np.uint64(seed), np.uint64(0))
    _raise_status(st, tuple(int(v) for v in n))
    return hold, ev


# --------------------------------------------------------------------------
# Kaplan-Meier

def km_mean(times, censored, horizon):
    """Restricted mean ``int_0^horizon S(t) dt`` of the Kaplan-Meier curve."""
    from statsmodels.duration.survfunc import SurvfuncRight

    times = np.minimum(np.asarray(times, float), horizon)
    status = (~np.asarray(censored, bool)).astype(int)
    if status.sum() == 0:
        return float(horizon)
    sf = SurvfuncRight(times, status)
    grid = np.concatenate([[0.0], sf.surv_times, [horizon]])
    surv = np.concatenate([[1.0], sf.surv_prob])
    return float(np.sum(surv * np.diff(grid)))


# --------------------------------------------------------------------------
# descent time

@dataclass
class DescentResult:
    Ks: list
    samples: dict
    censor_rate: dict
    means: dict
    slope: float | None = None
    intercept: float | None = None
    r2: float | None = None
    flagged: list = field(default_factory=list)
    rho: float = 1.0


def delta_region(n_star, K, rho):
    """The target ball centred at ``n*`` with radius ``2 rho sqrt(K)``."""
    return Ball(tuple(int(v) for v in n_star), 2.0 * rho * math.sqrt(K))


def descent_time_experiment(model, Ks, n0_rule="3x", replicas=200, seed=0, rho=1.0,
                            t_max=100.0, x_star=None) -> DescentResult:
    """Time for the process started far above ``n*`` to enter the target ball.

    ``n0_rule`` is ``"3x"`` (start at ``3 n*``), a callable ``K -> n0``, or a
    fixed state.  The mean is fitted against ``log K`` when at least two K
    values are given; a Kaplan-Meier mean replaces the sample mean whenever
    some replicas are censored at ``t_max``.
    """
    seeds = np.random.SeedSequence(seed).generate_state(len(Ks), dtype=np.uint64)
    samples, cens, means, flagged = {}, {}, {}, []
    for K, s in zip(Ks, seeds):
        n_star = lattice_fixed_point(model, K, x_star)
        if isinstance(n0_rule, str) and n0_rule == "3x":
            n0 = 3 * n_star
        elif callable(n0_rule):
            n0 = np.asarray(n0_rule(K), dtype=np.int64)
        else:
            n0 = np.asarray(n0_rule, dtype=np.int64)
        b = hitting_batch(model, K, n0, delta_region(n_star, K, rho), t_max, replicas, int(s))
        c = b.event != kern.HIT_A
        samples[K] = b.time.copy()
        cens[K] = float(c.mean())
        if cens[K] > 0.01:
            flagged.append(K)
        means[K] = km_mean(b.time, c, t_max) if c.any() else float(b.time.mean())
    res = DescentResult(list(Ks), samples, cens, means, flagged=flagged, rho=rho)
    if len(Ks) >= 2:
        fit = linregress(np.log(np.asarray(Ks, float)), [means[K] for K in Ks])
        res.slope, res.intercept, res.r2 = float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)
    return res


# --------------------------------------------------------------------------
# four domains

@dataclass
class FourDomainsValidation:
    constants: object
    start: np.ndarray
    t: float
    success: float
    stderr: float
    bound: float
    passed: bool
    replicas: int


def four_domains_validation(model, K, domains, log_psi, t, replicas, seed, start=None):
    """Empirical ``P(T_D1 <= t, T_H-2 > T_D1)`` against the lemma's lower bound.

    ``domains`` is a :class:`qsdlab.lyapunov.FourDomains`.  Replicas start at
    ``start`` (default: the state of ``H0`` where ``psi`` is largest, the
    least favourable start for the bound).
    """
    from .lyapunov import annulus_constants, lemma_bound

    const = annulus_constants(model, K, domains, log_psi)
    if start is None:
        start = const.argmax_h0
    start = np.asarray(start, dtype=np.int64)
    if not domains.in_h0(start):
        raise ValueError("start state must lie in H0")
    c = tuple(float(v) for v in domains.center)
    b = hitting_batch(model, K, start, Ball(c, domains.radii[0]), t, replicas, seed,
                      avoid=Outside(c, domains.radii[2]))
    p = float(np.mean(b.event == kern.HIT_A)) if replicas else float("nan")
    se = math.sqrt(p * (1 - p) / replicas) if replicas else float("nan")
    bound = lemma_bound(const, t)
    return FourDomainsValidation(const, start, float(t), p, se, bound,
                                 bool(p >= bound - 3 * se), replicas)
