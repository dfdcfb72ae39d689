"""Compiled event loops (direct-method exact simulation).

All kernels take the flattened monomial tables produced by
``Model.kernel_arrays()``.  Random numbers come from a counter-based
SplitMix64 stream keyed by ``(seed, stream)`` so that replica ``r`` of a
batch draws the same numbers whatever the thread layout.
"""

import numpy as np
from numba import njit, prange, types
from numba.typed import Dict

# status codes
OK = 0
NONFINITE = 1
NEGATIVE = 2
BUDGET = 3
BOUNDARY = 4

# event codes of the hitting kernel
CENSORED = 0
HIT_A = 1
HIT_B = 2
ABSORBED = 3

# region kinds
R_ORIGIN = 0
R_BALL = 1       # ||n - c||_2 <= r
R_OUTSIDE = 2    # ||n - c||_2 > r
R_CODES = 3      # membership in a sorted array of mixed-radix codes
R_NEVER = 4
R_ANNULUS = 5    # r_in < ||n - c||_2 <= r

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(inline="always")
def stream_key(seed, stream):
    return _mix(np.uint64(seed) ^ _mix(np.uint64(stream) * _GOLDEN + _GOLDEN))


@njit(inline="always")
def _uniform(key, ctr):
    """Uniform on (0, 1] from draw number ``ctr`` of stream ``key``."""
    z = _mix(key + np.uint64(ctr + 1) * _GOLDEN)
    return (np.float64(z >> _S11) + 1.0) * _INV53


@njit(cache=True)
def uniforms(seed, stream, n):
    key = stream_key(seed, stream)
    out = np.empty(n)
    for i in range(n):
        out[i] = _uniform(key, i)
    return out


@njit(inline="always")
def _field(x, coef, exps, comp, out):
    d = x.shape[0]
    for j in range(d):
        out[j] = 0.0
    for t in range(coef.shape[0]):
        v = coef[t]
        for l in range(d):
            e = exps[t, l]
            if e != 0:
                v *= x[l] ** e
        out[comp[t]] += v


@njit
def eval_scaled(n, K, bc, be, bj, dc, de, dj, b, dth):
    """Fill ``b``, ``dth`` with the scaled rates; return a status code."""
    d = n.shape[0]
    x = np.empty(d)
    for l in range(d):
        x[l] = n[l] / K
    _field(x, bc, be, bj, b)
    _field(x, dc, de, dj, dth)
    for j in range(d):
        b[j] *= K
        dth[j] *= K
        if not (np.isfinite(b[j]) and np.isfinite(dth[j])):
            return NONFINITE
        if b[j] < 0.0 or dth[j] < 0.0:
            return NEGATIVE
        if n[j] == 0 and dth[j] > 0.0:
            return BOUNDARY
    return OK


@njit(inline="always")
def _code(n, radix):
    c = np.int64(0)
    for l in range(n.shape[0] - 1, -1, -1):
        c = c * radix + n[l]
    return c


@njit
def _in_region(n, kind, center, r, r_in, codes, radix):
    if kind == R_NEVER:
        return False
    if kind == R_ORIGIN:
        for l in range(n.shape[0]):
            if n[l] != 0:
                return False
        return True
    if kind == R_CODES:
        c = _code(n, radix)
        i = np.searchsorted(codes, c)
        return i < codes.shape[0] and codes[i] == c
    s = 0.0
    for l in range(n.shape[0]):
        z = n[l] - center[l]
        s += z * z
    if kind == R_BALL:
        return s <= r * r
    if kind == R_OUTSIDE:
        return s > r * r
    return s > r_in * r_in and s <= r * r


@njit(inline="always")
def _is_zero(n):
    for l in range(n.shape[0]):
        if n[l] != 0:
            return False
    return True


@njit(inline="always")
def _pick(b, dth, total, u):
    """Index in ``0..2d-1``: ``j`` is a birth in ``j``, ``d + j`` a death."""
    d = b.shape[0]
    target = u * total
    acc = 0.0
    last = -1
    for j in range(d):
        if b[j] > 0.0:
            acc += b[j]
            last = j
            if target <= acc:
                return j
    for j in range(d):
        if dth[j] > 0.0:
            acc += dth[j]
            last = d + j
            if target <= acc:
                return d + j
    return last


@njit(inline="always")
def _apply(n, ev):
    d = n.shape[0]
    if ev < d:
        n[ev] += 1
    else:
        n[ev - d] -= 1


@njit(cache=True)
def trajectory(bc, be, bj, dc, de, dj, K, n0, t_max, seed, stream, max_events,
               kind, center, r, r_in, codes, radix):
    """One path, stopping at ``t_max``, absorption or entry into the region.

    Returns ``(times, states, reason, status)`` with reason 0 = t_max,
    1 = absorbed, 2 = target hit, 3 = event budget.
    """
    d = n0.shape[0]
    key = stream_key(seed, stream)
    cap = 1024
    times = np.empty(cap)
    states = np.empty((cap, d), dtype=np.int64)
    n = n0.copy()
    times[0] = 0.0
    states[0] = n
    k = 1
    t = 0.0
    ctr = 0
    b = np.empty(d)
    dth = np.empty(d)
    reason = 0
    status = OK
    while True:
        if _in_region(n, kind, center, r, r_in, codes, radix):
            reason = 2
            break
        if _is_zero(n):
            reason = 1
            break
        status = eval_scaled(n, K, bc, be, bj, dc, de, dj, b, dth)
        if status != OK:
            break
        total = b.sum() + dth.sum()
        if total <= 0.0:
            reason = 1
            break
        t += -np.log(_uniform(key, ctr)) / total
        ctr += 1
        if t > t_max:
            reason = 0
            break
        ev = _pick(b, dth, total, _uniform(key, ctr))
        ctr += 1
        _apply(n, ev)
        if k == cap:
            cap *= 2
            nt = np.empty(cap)
            ns = np.empty((cap, d), dtype=np.int64)
            nt[:k] = times[:k]
            ns[:k] = states[:k]
            times = nt
            states = ns
        times[k] = t
        states[k] = n
        k += 1
        if k > max_events:
            reason = 3
            status = BUDGET
            break
    return times[:k], states[:k], reason, status


@njit(parallel=True, cache=True)
def batch_snapshot(bc, be, bj, dc, de, dj, K, init, obs, t_end, seed, stream0, max_events):
    """State of each replica at the sorted observation times plus ``T_0``.

    ``init`` has one row per replica.  Absorbed replicas report the origin
    at later observation times.  ``T_0`` is ``inf`` if the replica is still
    alive at ``t_end``.
    """
    R, d = init.shape
    m = obs.shape[0]
    out = np.zeros((R, m, d), dtype=np.int64)
    t0 = np.full(R, np.inf)
    status = np.zeros(R, dtype=np.int64)
    for i in prange(R):
        key = stream_key(seed, stream0 + i)
        n = init[i].copy()
        b = np.empty(d)
        dth = np.empty(d)
        t = 0.0
        ctr = 0
        k = 0
        events = 0
        while True:
            if _is_zero(n):
                t0[i] = t
                break
            st = eval_scaled(n, K, bc, be, bj, dc, de, dj, b, dth)
            if st != OK:
                status[i] = st
                break
            total = b.sum() + dth.sum()
            if total <= 0.0:
                t0[i] = t
                break
            t_next = t - np.log(_uniform(key, ctr)) / total
            ctr += 1
            while k < m and obs[k] < t_next:
                out[i, k] = n
                k += 1
            if t_next > t_end:
                break
            t = t_next
            _apply(n, _pick(b, dth, total, _uniform(key, ctr)))
            ctr += 1
            events += 1
            if events > max_events:
                status[i] = BUDGET
                break
        # after absorption the remaining observations see the origin (zeros)
    return out, t0, status


@njit(parallel=True, cache=True)
def batch_hitting(bc, be, bj, dc, de, dj, K, init, t_max, seed, stream0, max_events,
                  kind_a, center_a, r_a, rin_a, codes_a,
                  kind_b, center_b, r_b, rin_b, codes_b, radix):
    """First entrance into region A or region B, whichever comes first."""
    R, d = init.shape
    event = np.zeros(R, dtype=np.int64)
    times = np.full(R, np.inf)
    final = np.zeros((R, d), dtype=np.int64)
    status = np.zeros(R, dtype=np.int64)
    for i in prange(R):
        key = stream_key(seed, stream0 + i)
        n = init[i].copy()
        b = np.empty(d)
        dth = np.empty(d)
        t = 0.0
        ctr = 0
        events = 0
        while True:
            if _in_region(n, kind_a, center_a, r_a, rin_a, codes_a, radix):
                event[i] = HIT_A
                times[i] = t
                break
            if _in_region(n, kind_b, center_b, r_b, rin_b, codes_b, radix):
                event[i] = HIT_B
                times[i] = t
                break
            if _is_zero(n):
                event[i] = ABSORBED
                times[i] = t
                break
            st = eval_scaled(n, K, bc, be, bj, dc, de, dj, b, dth)
            if st != OK:
                status[i] = st
                break
            total = b.sum() + dth.sum()
            if total <= 0.0:
                event[i] = ABSORBED
                times[i] = t
                break
            t += -np.log(_uniform(key, ctr)) / total
            ctr += 1
            if t > t_max:
                event[i] = CENSORED
                break
            _apply(n, _pick(b, dth, total, _uniform(key, ctr)))
            ctr += 1
            events += 1
            if events > max_events:
                status[i] = BUDGET
                break
        final[i] = n
    return event, times, final, status


@njit(inline="always")
def _hermite(t, h, xs, fs, G, l):
    i = int(t / h)
    if i >= G:
        i = G - 1
    s = (t - i * h) / h
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * xs[i, l] + (s3 - 2 * s2 + s) * h * fs[i, l]
            + (-2 * s3 + 3 * s2) * xs[i + 1, l] + (s3 - s2) * h * fs[i + 1, l])


@njit(inline="always")
def _dev(n, K, t, h, xs, fs, G):
    s = 0.0
    for l in range(n.shape[0]):
        s += abs(n[l] / K - _hermite(t, h, xs, fs, G, l))
    return s


@njit(parallel=True, cache=True)
def batch_kurtz_sup(bc, be, bj, dc, de, dj, K, n0, xs, fs, t_bar, seed, stream0, R, max_events):
    """``sup_{t <= t_bar} |N(t)/K - x(t)|_1`` per replica.

    The flow is given on the uniform grid ``xs`` with derivatives ``fs``
    (cubic Hermite between nodes).  The supremum is taken over jump instants
    (both one-sided limits) and grid nodes.
    """
    G = xs.shape[0] - 1
    h = t_bar / G
    d = n0.shape[0]
    sup = np.zeros(R)
    status = np.zeros(R, dtype=np.int64)
    for i in prange(R):
        key = stream_key(seed, stream0 + i)
        n = n0.copy()
        b = np.empty(d)
        dth = np.empty(d)
        t = 0.0
        ctr = 0
        g = 1
        best = _dev(n, K, 0.0, h, xs, fs, G)
        events = 0
        while True:
            alive = not _is_zero(n)
            total = 0.0
            if alive:
                st = eval_scaled(n, K, bc, be, bj, dc, de, dj, b, dth)
                if st != OK:
                    status[i] = st
                    break
                total = b.sum() + dth.sum()
            if total > 0.0:
                t_next = t - np.log(_uniform(key, ctr)) / total
                ctr += 1
            else:
                t_next = np.inf
            end = t_next if t_next < t_bar else t_bar
            while g <= G and g * h < end:
                v = _dev(n, K, g * h, h, xs, fs, G)
                if v > best:
                    best = v
                g += 1
            v = _dev(n, K, end, h, xs, fs, G)
            if v > best:
                best = v
            if t_next >= t_bar:
                break
            t = t_next
            _apply(n, _pick(b, dth, total, _uniform(key, ctr)))
            ctr += 1
            v = _dev(n, K, t, h, xs, fs, G)
            if v > best:
                best = v
            events += 1
            if events > max_events:
                status[i] = BUDGET
                break
        sup[i] = best
    return sup, status


@njit(cache=True)
def first_jumps(bc, be, bj, dc, de, dj, K, n, samples, seed, stream):
    """Holding times and event indices of ``samples`` independent first jumps from ``n``."""
    d = n.shape[0]
    key = stream_key(seed, stream)
    b = np.empty(d)
    dth = np.empty(d)
    st = eval_scaled(n, K, bc, be, bj, dc, de, dj, b, dth)
    hold = np.empty(samples)
    ev = np.empty(samples, dtype=np.int64)
    total = b.sum() + dth.sum()
    for s in range(samples):
        hold[s] = -np.log(_uniform(key, 2 * s)) / total
        ev[s] = _pick(b, dth, total, _uniform(key, 2 * s + 1))
    return hold, ev, st


@njit(cache=True)
def _tree_update(tree, size, i, v):
    p = size + i
    tree[p] = v
    p //= 2
    while p >= 1:
        tree[p] = tree[2 * p] + tree[2 * p + 1]
        p //= 2


@njit(cache=True)
def _tree_find(tree, size, u):
    target = u * tree[1]
    p = 1
    while p < size:
        if target <= tree[2 * p] and tree[2 * p] > 0.0:
            p = 2 * p
        else:
            target -= tree[2 * p]
            p = 2 * p + 1
    return p - size


@njit(cache=True)
def fleming_viot(bc, be, bj, dc, de, dj, K, init, t_max, seed, radix, max_events):
    """Fleming-Viot swarm; returns occupation times on ``[t_max/2, t_max]``.

    Particle ``i`` holds state ``init[i]``.  A particle whose jump lands on
    the origin is moved to the state of another particle chosen uniformly.
    Returns ``(codes, weights, restarts, status)``.
    """
    N, d = init.shape
    key = stream_key(seed, 0)
    ctr = 0
    size = 1
    while size < N:
        size *= 2
    tree = np.zeros(2 * size)
    states = init.copy()
    last = np.zeros(N)
    b = np.empty(d)
    dth = np.empty(d)
    rate_b = np.zeros((N, d))
    rate_d = np.zeros((N, d))
    status = OK
    for i in range(N):
        st = eval_scaled(states[i], K, bc, be, bj, dc, de, dj, b, dth)
        if st != OK:
            status = st
        rate_b[i] = b
        rate_d[i] = dth
        _tree_update(tree, size, i, b.sum() + dth.sum())
    occ = Dict.empty(key_type=types.int64, value_type=types.float64)
    half = 0.5 * t_max
    t = 0.0
    restarts = 0
    events = 0
    while status == OK:
        total = tree[1]
        if total <= 0.0:
            break
        t_next = t - np.log(_uniform(key, ctr)) / total
        ctr += 1
        if t_next > t_max:
            break
        t = t_next
        i = _tree_find(tree, size, _uniform(key, ctr))
        ctr += 1
        # bank the time particle i spent in its current state
        lo = last[i] if last[i] > half else half
        if t > lo:
            c = _code(states[i], radix)
            occ[c] = occ.get(c, 0.0) + (t - lo)
        last[i] = t
        tot_i = rate_b[i].sum() + rate_d[i].sum()
        ev = _pick(rate_b[i], rate_d[i], tot_i, _uniform(key, ctr))
        ctr += 1
        _apply(states[i], ev)
        if _is_zero(states[i]):
            if N == 1:
                restarts += 1
                states[i] = init[0]
            else:
                j = int(_uniform(key, ctr) * (N - 1))
                ctr += 1
                if j >= N - 1:
                    j = N - 2
                if j >= i:
                    j += 1
                states[i] = states[j]
        st = eval_scaled(states[i], K, bc, be, bj, dc, de, dj, b, dth)
        if st != OK:
            status = st
        rate_b[i] = b
        rate_d[i] = dth
        _tree_update(tree, size, i, b.sum() + dth.sum())
        events += 1
        if events > max_events:
            status = BUDGET
    end = t_max if status == OK else t
    for i in range(N):
        lo = last[i] if last[i] > half else half
        if end > lo:
            c = _code(states[i], radix)
            occ[c] = occ.get(c, 0.0) + (end - lo)
    n_codes = len(occ)
    codes = np.empty(n_codes, dtype=np.int64)
    weights = np.empty(n_codes)
    k = 0
    for c, w in occ.items():
        codes[k] = c
        weights[k] = w
        k += 1
    return codes, weights, restarts, status
