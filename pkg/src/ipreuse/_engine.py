"""Compiled kernels for the IP pool and the allocation simulation.

All state lives in plain NumPy arrays grouped in named tuples so that numba
can cache the compiled functions on disk.  The Python-facing classes in
:mod:`ipreuse.pool` and :mod:`ipreuse.sim` own these arrays and call into the
kernels; nothing here allocates per-operation.

Free IPs move through two stages: a FIFO of cooling IPs (release order is time
order because the clock never runs backwards) and the eligible structure.  For
``RANDOM`` the eligible structure is a dense array with swap-removal; for
``LRU`` and ``TAGGING`` it is a doubly linked list ordered by
``(release_time, ip)`` plus, for tagging, one such list per tenant.
"""

from __future__ import annotations

from typing import NamedTuple

import numba
import numpy as np

RANDOM, LRU, TAGGING = 0, 1, 2
EXACT, SKETCH = 0, 1

ALLOCATED, COOLING, ELIGIBLE = 0, 1, 2
NEVER = -1

ERR_EXHAUSTED = -1
ERR_TIME = -2
ERR_NOT_ALLOCATED = -3

# slots in PoolArrays.scal
S_POOL = 0
S_COOLDOWN = 1
S_POLICY = 2
S_NTENANTS = 3
S_NOW = 4
S_ELIG_N = 5
S_COOL_HEAD = 6
S_COOL_N = 7
S_GHEAD = 8
S_GTAIL = 9
S_MODE = 10
S_LIST_N = 11
S_FRESH = 12
S_PROMOTED = 13
N_SCAL = 14

SMALL_SLOTS = 16
HLL_BITS = 7
HLL_M = 1 << HLL_BITS

# slots in SimArrays.scal
A_ALLOCS = 0
A_UNIQUE = 1
A_EXHAUST = 2
A_TENANT_ALLOCS = 3
A_TENANT_RELEASES = 4
A_TRACE_N = 5
A_ADV_EXHAUST = 6
A_ADV_N = 7
A_TICKS = 8
A_ACTIVE = 9
N_ASCAL = 10

# slots in the sim parameter vector
P_TICK = 0
P_QUOTA_MAX = 1
P_ADV_QUOTA = 2
P_ADV_HOLD = 3
P_TARGET = 4
P_WARMUP = 5
P_ADVERSARY = 6
P_DURATION = 7
P_WAIT_CYCLE = 8
N_PARAMS = 9

# Hot kernels never allocate, so they run without numba's reference counting;
# with it every array alias in a loop costs a pair of atomic operations.
_kernel = numba.njit(cache=True, _nrt=False)

EV_ALLOCATE = 0
EV_RELEASE = 1


class PoolArrays(NamedTuple):
    holder: np.ndarray
    acquired: np.ndarray
    released: np.ndarray
    tag: np.ndarray
    status: np.ndarray
    elig: np.ndarray
    elig_pos: np.ndarray
    gprev: np.ndarray
    gnext: np.ndarray
    tprev: np.ndarray
    tnext: np.ndarray
    thead: np.ndarray
    ttail: np.ndarray
    cool: np.ndarray
    batch: np.ndarray
    bits: np.ndarray
    small: np.ndarray
    small_n: np.ndarray
    hll: np.ndarray
    scal: np.ndarray


class SimArrays(NamedTuple):
    held: np.ndarray
    held_n: np.ndarray
    order: np.ndarray
    adv_ips: np.ndarray
    adv_acq: np.ndarray
    other_rel: np.ndarray
    adv_seen: np.ndarray
    prev_counts: np.ndarray
    intervals: np.ndarray
    scal: np.ndarray


def new_pool_arrays(pool_size: int, cooldown: int, policy: int, n_tenants: int, mode: int) -> PoolArrays:
    p = pool_size
    listed = policy != RANDOM
    tagged = policy == TAGGING
    nt = n_tenants if tagged else 1
    words = (n_tenants + 63) // 64
    scal = np.zeros(N_SCAL, np.int64)
    scal[S_POOL] = p
    scal[S_COOLDOWN] = cooldown
    scal[S_POLICY] = policy
    scal[S_NTENANTS] = n_tenants
    scal[S_NOW] = np.iinfo(np.int64).min
    scal[S_PROMOTED] = np.iinfo(np.int64).min
    scal[S_MODE] = mode
    scal[S_FRESH] = p
    ids = np.arange(p, dtype=np.int32)
    gprev = np.full(p if listed else 1, -1, np.int32)
    gnext = np.full(p if listed else 1, -1, np.int32)
    if listed:
        gprev[1:] = ids[:-1]
        gnext[:-1] = ids[1:]
        scal[S_GHEAD] = 0
        scal[S_GTAIL] = p - 1
        scal[S_LIST_N] = p
    else:
        scal[S_GHEAD] = -1
        scal[S_GTAIL] = -1
        scal[S_ELIG_N] = p
    exact = mode == EXACT
    return PoolArrays(
        holder=np.full(p, -1, np.int32),
        acquired=np.full(p, NEVER, np.int64),
        released=np.full(p, NEVER, np.int64),
        tag=np.full(p, -1, np.int32),
        status=np.full(p, ELIGIBLE, np.int8),
        elig=ids.copy() if not listed else np.zeros(1, np.int32),
        elig_pos=ids.copy() if not listed else np.zeros(1, np.int32),
        gprev=gprev,
        gnext=gnext,
        tprev=np.full(p if tagged else 1, -1, np.int32),
        tnext=np.full(p if tagged else 1, -1, np.int32),
        thead=np.full(nt, -1, np.int32),
        ttail=np.full(nt, -1, np.int32),
        cool=np.zeros(p, np.int32),
        batch=np.zeros(p if listed else 1, np.int64),
        bits=np.zeros((p, words) if exact else (1, 1), np.uint64),
        small=np.zeros((1, 1) if exact else (p, SMALL_SLOTS), np.int32),
        small_n=np.zeros(1 if exact else p, np.int32),
        hll=np.zeros((1, 1) if exact else (p, HLL_M), np.uint8),
        scal=scal,
    )


@_kernel
def randbelow(rng, n):
    # 53-bit uniform; bias is below n / 2**53
    return int(rng.random() * n)


@_kernel
def _mix64(x):
    z = np.uint64(x) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@_kernel
def _hll_add(pa, ip, tenant):
    h = _mix64(tenant)
    idx = int(h >> np.uint64(64 - HLL_BITS))
    rest = h << np.uint64(HLL_BITS)
    rho = 1
    top = np.uint64(1) << np.uint64(63)
    while rho <= 64 - HLL_BITS and (rest & top) == np.uint64(0):
        rest = rest << np.uint64(1)
        rho += 1
    if pa.hll[ip, idx] < rho:
        pa.hll[ip, idx] = rho


@_kernel
def _hll_estimate(pa, ip):
    m = HLL_M
    total = 0.0
    zeros = 0
    for j in range(m):
        r = pa.hll[ip, j]
        total += 2.0 ** (-float(r))
        if r == 0:
            zeros += 1
    alpha = 0.7213 / (1.0 + 1.079 / m)
    est = alpha * m * m / total
    if est <= 2.5 * m and zeros > 0:
        est = m * np.log(m / zeros)
    return est


@_kernel
def _popcount(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return int((x * np.uint64(0x0101010101010101)) >> np.uint64(56))


@_kernel
def record_tenant(pa, ip, tenant):
    if pa.scal[S_MODE] == EXACT:
        # unconditional OR; a test-and-set here defeats numba's codegen badly
        pa.bits[ip, tenant >> 6] |= np.uint64(1) << np.uint64(tenant & 63)
        return
    k = pa.small_n[ip]
    if k <= SMALL_SLOTS:
        for j in range(min(k, SMALL_SLOTS)):
            if pa.small[ip, j] == tenant:
                return
        if k < SMALL_SLOTS:
            pa.small[ip, k] = tenant
        pa.small_n[ip] = k + 1
    _hll_add(pa, ip, tenant)


@_kernel
def distinct_count(pa, ip):
    if pa.scal[S_MODE] == EXACT:
        total = 0
        for w in range(pa.bits.shape[1]):
            total += _popcount(pa.bits[ip, w])
        return total
    if pa.small_n[ip] <= SMALL_SLOTS:
        return int(pa.small_n[ip])
    est = int(np.round(_hll_estimate(pa, ip)))
    return max(est, SMALL_SLOTS + 1)


@_kernel
def _glist_insert(pa, ip):
    r = pa.released[ip]
    node = pa.scal[S_GTAIL]
    while node >= 0 and (pa.released[node] > r or (pa.released[node] == r and node > ip)):
        node = pa.gprev[node]
    if node < 0:
        nxt = pa.scal[S_GHEAD]
        pa.scal[S_GHEAD] = ip
    else:
        nxt = pa.gnext[node]
        pa.gnext[node] = ip
    pa.gprev[ip] = node
    pa.gnext[ip] = nxt
    if nxt < 0:
        pa.scal[S_GTAIL] = ip
    else:
        pa.gprev[nxt] = ip
    pa.scal[S_LIST_N] += 1


@_kernel
def _glist_remove(pa, ip):
    prv = pa.gprev[ip]
    nxt = pa.gnext[ip]
    if prv < 0:
        pa.scal[S_GHEAD] = nxt
    else:
        pa.gnext[prv] = nxt
    if nxt < 0:
        pa.scal[S_GTAIL] = prv
    else:
        pa.gprev[nxt] = prv
    pa.gprev[ip] = -1
    pa.gnext[ip] = -1
    pa.scal[S_LIST_N] -= 1


@_kernel
def _tlist_insert(pa, ip, t):
    r = pa.released[ip]
    node = pa.ttail[t]
    while node >= 0 and (pa.released[node] > r or (pa.released[node] == r and node > ip)):
        node = pa.tprev[node]
    if node < 0:
        nxt = pa.thead[t]
        pa.thead[t] = ip
    else:
        nxt = pa.tnext[node]
        pa.tnext[node] = ip
    pa.tprev[ip] = node
    pa.tnext[ip] = nxt
    if nxt < 0:
        pa.ttail[t] = ip
    else:
        pa.tprev[nxt] = ip


@_kernel
def _tlist_remove(pa, ip, t):
    prv = pa.tprev[ip]
    nxt = pa.tnext[ip]
    if prv < 0:
        pa.thead[t] = nxt
    else:
        pa.tnext[prv] = nxt
    if nxt < 0:
        pa.ttail[t] = prv
    else:
        pa.tprev[nxt] = prv
    pa.tprev[ip] = -1
    pa.tnext[ip] = -1


@_kernel
def _sift(a, start, end):
    root = start
    while True:
        child = 2 * root + 1
        if child >= end:
            return
        if child + 1 < end and a[child] < a[child + 1]:
            child += 1
        if a[root] >= a[child]:
            return
        a[root], a[child] = a[child], a[root]
        root = child


@_kernel
def _heapsort(a, n):
    """Sort ``a[:n]`` in place (numba's own sort needs the refcounting runtime)."""
    for start in range(n // 2 - 1, -1, -1):
        _sift(a, start, n)
    for end in range(n - 1, 0, -1):
        a[0], a[end] = a[end], a[0]
        _sift(a, 0, end)


@_kernel
def _promote(pa, now):
    p = pa.scal[S_POOL]
    policy = pa.scal[S_POLICY]
    threshold = now - pa.scal[S_COOLDOWN]
    n = 0
    while pa.scal[S_COOL_N] > 0:
        head = pa.scal[S_COOL_HEAD]
        ip = pa.cool[head]
        if pa.released[ip] > threshold:
            break
        pa.scal[S_COOL_HEAD] = (head + 1) % p
        pa.scal[S_COOL_N] -= 1
        pa.status[ip] = ELIGIBLE
        if policy == RANDOM:
            k = pa.scal[S_ELIG_N]
            pa.elig[k] = ip
            pa.elig_pos[ip] = k
            pa.scal[S_ELIG_N] = k + 1
        else:
            pa.batch[n] = pa.released[ip] * p + ip
            n += 1
    if n > 0:
        _heapsort(pa.batch, n)
        for j in range(n):
            ip = pa.batch[j] % p
            _glist_insert(pa, ip)
            if policy == TAGGING:
                _tlist_insert(pa, ip, pa.tag[ip])


@_kernel
def advance(pa, now):
    """Move every cooled-down IP into the eligible structure; ERR_TIME if the clock goes back."""
    if now < pa.scal[S_NOW]:
        return ERR_TIME
    pa.scal[S_NOW] = now
    # with a positive cooldown nothing released at ``now`` can be due yet
    if now == pa.scal[S_PROMOTED] and pa.scal[S_COOLDOWN] > 0:
        return 0
    pa.scal[S_PROMOTED] = now
    if pa.scal[S_COOL_N] > 0 and pa.released[pa.cool[pa.scal[S_COOL_HEAD]]] <= now - pa.scal[S_COOLDOWN]:
        _promote(pa, now)
    return 0


@_kernel
def allocate(rng, pa, tenant, now):
    err = advance(pa, now)
    if err < 0:
        return err
    policy = pa.scal[S_POLICY]
    if policy == RANDOM:
        n = pa.scal[S_ELIG_N]
        if n == 0:
            return ERR_EXHAUSTED
        k = randbelow(rng, n)
        ip = pa.elig[k]
        last = pa.elig[n - 1]
        pa.elig[k] = last
        pa.elig_pos[last] = k
        pa.scal[S_ELIG_N] = n - 1
    else:
        ip = -1
        if policy == TAGGING:
            ip = pa.thead[tenant]
        if ip < 0:
            ip = pa.scal[S_GHEAD]
        if ip < 0:
            return ERR_EXHAUSTED
        _glist_remove(pa, ip)
        if policy == TAGGING and pa.tag[ip] >= 0:
            _tlist_remove(pa, ip, pa.tag[ip])
    if pa.acquired[ip] == NEVER:
        pa.scal[S_FRESH] -= 1
    pa.status[ip] = ALLOCATED
    pa.holder[ip] = tenant
    pa.acquired[ip] = now
    record_tenant(pa, ip, tenant)
    return ip


@_kernel
def release(pa, ip, now):
    """Free ``ip``; returns the releasing tenant or a negative error code."""
    if pa.holder[ip] < 0:
        return ERR_NOT_ALLOCATED
    if now < pa.scal[S_NOW]:
        return ERR_TIME
    pa.scal[S_NOW] = now
    tenant = pa.holder[ip]
    pa.holder[ip] = -1
    pa.released[ip] = now
    pa.tag[ip] = tenant
    pa.status[ip] = COOLING
    p = pa.scal[S_POOL]
    pos = (pa.scal[S_COOL_HEAD] + pa.scal[S_COOL_N]) % p
    pa.cool[pos] = ip
    pa.scal[S_COOL_N] += 1
    return tenant


@numba.njit(cache=True, _nrt=True)
def eligible_ips(pa, now):
    err = advance(pa, now)
    if err < 0:
        return np.zeros(0, np.int32), err
    if pa.scal[S_POLICY] == RANDOM:
        return pa.elig[: pa.scal[S_ELIG_N]].copy(), 0
    out = np.empty(pa.scal[S_LIST_N], np.int32)
    node = pa.scal[S_GHEAD]
    k = 0
    while node >= 0:
        out[k] = node
        k += 1
        node = pa.gnext[node]
    return out, 0


@_kernel
def _trace(tr_kind, tr_time, tr_ip, tr_tenant, sa, kind, now, ip, tenant):
    k = sa.scal[A_TRACE_N]
    if k < tr_kind.shape[0]:
        tr_kind[k] = kind
        tr_time[k] = now
        tr_ip[k] = ip
        tr_tenant[k] = tenant
        sa.scal[A_TRACE_N] = k + 1


@_kernel
def run_tick(rng, pa, sa, params, now, tr_kind, tr_time, tr_ip, tr_tenant, tracing):
    n_tenants = sa.held_n.shape[0]
    qmax = params[P_QUOTA_MAX]
    adversary = params[P_ADVERSARY]
    order = sa.order
    for i in range(n_tenants - 1, 0, -1):
        j = randbelow(rng, i + 1)
        tmp = order[i]
        order[i] = order[j]
        order[j] = tmp

    for idx in range(n_tenants):
        t = order[idx]
        q = randbelow(rng, qmax + 1)
        h = sa.held_n[t]
        while h > q:
            j = randbelow(rng, h) if h > 1 else 0
            ip = sa.held[t, j]
            sa.held[t, j] = sa.held[t, h - 1]
            h -= 1
            release(pa, ip, now)
            sa.other_rel[ip] = now
            sa.scal[A_TENANT_RELEASES] += 1
            if tracing:
                _trace(tr_kind, tr_time, tr_ip, tr_tenant, sa, EV_RELEASE, now, ip, t)
        while h < q:
            ip = allocate(rng, pa, t, now)
            if ip < 0:
                sa.scal[A_EXHAUST] += 1
                break
            sa.held[t, h] = ip
            h += 1
            sa.scal[A_TENANT_ALLOCS] += 1
            if tracing:
                _trace(tr_kind, tr_time, tr_ip, tr_tenant, sa, EV_ALLOCATE, now, ip, t)
        sa.held_n[t] = h

    if sa.scal[A_ACTIVE] == 0 and now >= params[P_WARMUP]:
        if params[P_WAIT_CYCLE] == 0 or pa.scal[S_FRESH] == 0:
            sa.scal[A_ACTIVE] = 1
    if sa.scal[A_ACTIVE] == 1:
        hold = params[P_ADV_HOLD]
        kept = 0
        for j in range(sa.scal[A_ADV_N]):
            ip = sa.adv_ips[j]
            if now - sa.adv_acq[j] >= hold:
                release(pa, ip, now)
                if tracing:
                    _trace(tr_kind, tr_time, tr_ip, tr_tenant, sa, EV_RELEASE, now, ip, adversary)
            else:
                sa.adv_ips[kept] = ip
                sa.adv_acq[kept] = sa.adv_acq[j]
                kept += 1
        sa.scal[A_ADV_N] = kept
        target = params[P_TARGET]
        while sa.scal[A_ADV_N] < params[P_ADV_QUOTA] and sa.scal[A_ALLOCS] < target:
            ip = allocate(rng, pa, adversary, now)
            if ip < 0:
                sa.scal[A_ADV_EXHAUST] += 1
                break
            k = sa.scal[A_ADV_N]
            sa.adv_ips[k] = ip
            sa.adv_acq[k] = now
            sa.scal[A_ADV_N] = k + 1
            if tracing:
                _trace(tr_kind, tr_time, tr_ip, tr_tenant, sa, EV_ALLOCATE, now, ip, adversary)
            n = sa.scal[A_ALLOCS]
            if sa.adv_seen[ip] == 0:
                sa.adv_seen[ip] = 1
                sa.scal[A_UNIQUE] += 1
            # the adversary itself is always in the set by now
            sa.prev_counts[n] = max(distinct_count(pa, ip) - 1, 0)
            if sa.other_rel[ip] >= 0:
                sa.intervals[n] = now - sa.other_rel[ip]
            else:
                sa.intervals[n] = NEVER
            sa.scal[A_ALLOCS] = n + 1
    sa.scal[A_TICKS] += 1


@_kernel
def run_ticks(rng, pa, sa, params, first_tick, max_ticks, tr_kind, tr_time, tr_ip, tr_tenant, tracing):
    """Run up to ``max_ticks`` ticks; stop early once the adversary target or duration is hit."""
    done = 0
    tick = params[P_TICK]
    duration = params[P_DURATION]
    while done < max_ticks:
        if sa.scal[A_ALLOCS] >= params[P_TARGET]:
            break
        now = (first_tick + done) * tick
        if duration >= 0 and now >= duration:
            break
        run_tick(rng, pa, sa, params, now, tr_kind, tr_time, tr_ip, tr_tenant, tracing)
        done += 1
    return done
