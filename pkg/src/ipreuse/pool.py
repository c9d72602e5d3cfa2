"""Shared cloud IP pool with a release cooldown and pluggable allocation policy.

IPs are dense integer ids ``0 .. pool_size-1`` and times are integer seconds.
The clock is monotone: an operation stamped earlier than a previous one is
rejected.

>>> pool = Pool(PoolConfig(pool_size=3, cooldown=1800, policy=Policy.LRU), n_tenants=2)
>>> pool.allocate(0, now=0)
0
>>> pool.release(0, now=600)
>>> sorted(pool.eligible(now=600))
[1, 2]
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _engine as eng


class PoolError(Exception):
    pass


class PoolExhausted(PoolError):
    """No IP is eligible at the requested time."""


class NotAllocated(PoolError):
    """Release of an IP that is not currently held."""


class ClockError(PoolError, ValueError):
    """An operation was stamped earlier than the pool's current time."""


class Policy(str, enum.Enum):
    RANDOM = "random"
    LRU = "lru"
    TAGGING = "tagging"

    @property
    def code(self) -> int:
        return {Policy.RANDOM: eng.RANDOM, Policy.LRU: eng.LRU, Policy.TAGGING: eng.TAGGING}[self]


class DistinctMode(str, enum.Enum):
    """How prior tenants per IP are counted.

    ``exact`` keeps one bit per (ip, tenant); ``sketch`` keeps the first 16
    tenants exactly and a 128-register HyperLogLog beyond that.  ``auto``
    picks exact whenever the bitset fits in 256 MiB.
    """

    AUTO = "auto"
    EXACT = "exact"
    SKETCH = "sketch"


EXACT_BUDGET_BYTES = 256 * 2**20


@dataclass(frozen=True)
class PoolConfig:
    pool_size: int
    cooldown: int = 1800
    policy: Policy = Policy.RANDOM

    def __post_init__(self) -> None:
        if self.pool_size <= 0:
            raise ValueError("pool_size must be positive")
        if self.cooldown < 0:
            raise ValueError("cooldown must be non-negative")
        object.__setattr__(self, "policy", Policy(self.policy))


@dataclass(frozen=True)
class Allocated:
    tenant: int
    acquire_time: int


@dataclass(frozen=True)
class PoolEntry:
    ip: int
    state: Allocated | None  # None means free
    last_release_time: int | None
    tag_tenant: int | None
    prior_tenants: frozenset[int] | None  # None when counted by sketch
    prior_tenant_count: int

    @property
    def free(self) -> bool:
        return self.state is None


def resolve_mode(mode: DistinctMode | str, pool_size: int, n_tenants: int) -> int:
    mode = DistinctMode(mode)
    if mode is DistinctMode.AUTO:
        need = pool_size * ((n_tenants + 63) // 64) * 8
        mode = DistinctMode.EXACT if need <= EXACT_BUDGET_BYTES else DistinctMode.SKETCH
    return eng.EXACT if mode is DistinctMode.EXACT else eng.SKETCH


class Pool:
    """A single-zone IP pool.

    ``n_tenants`` bounds the tenant id space (ids are ``0 .. n_tenants-1``).
    ``rng`` drives the Random policy; pass a seeded ``numpy.random.Generator``
    or an integer seed.
    """

    def __init__(
        self,
        config: PoolConfig,
        n_tenants: int,
        rng: np.random.Generator | int | None = 0,
        distinct: DistinctMode | str = DistinctMode.AUTO,
    ) -> None:
        if n_tenants <= 0:
            raise ValueError("n_tenants must be positive")
        self.config = config
        self.n_tenants = n_tenants
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.mode = resolve_mode(distinct, config.pool_size, n_tenants)
        self.arrays = eng.new_pool_arrays(
            config.pool_size, int(config.cooldown), config.policy.code, n_tenants, self.mode
        )

    def __len__(self) -> int:
        return self.config.pool_size

    @property
    def exact(self) -> bool:
        return self.mode == eng.EXACT

    def _check_ip(self, ip: int) -> None:
        if not 0 <= ip < self.config.pool_size:
            raise IndexError(f"ip {ip} outside pool of {self.config.pool_size}")

    def eligible(self, now: int) -> set[int]:
        ips, err = eng.eligible_ips(self.arrays, int(now))
        if err == eng.ERR_TIME:
            raise ClockError(f"time {now} precedes pool clock")
        return set(ips.tolist())

    def allocate(self, tenant: int, now: int) -> int:
        if not 0 <= tenant < self.n_tenants:
            raise ValueError(f"tenant {tenant} outside 0..{self.n_tenants - 1}")
        ip = eng.allocate(self.rng, self.arrays, tenant, int(now))
        if ip == eng.ERR_EXHAUSTED:
            raise PoolExhausted(f"no eligible IP at t={now}")
        if ip == eng.ERR_TIME:
            raise ClockError(f"time {now} precedes pool clock")
        return int(ip)

    def release(self, ip: int, now: int) -> None:
        self._check_ip(ip)
        rc = eng.release(self.arrays, ip, int(now))
        if rc == eng.ERR_NOT_ALLOCATED:
            raise NotAllocated(f"ip {ip} is not allocated")
        if rc == eng.ERR_TIME:
            raise ClockError(f"time {now} precedes pool clock")

    def prior_tenant_count(self, ip: int) -> int:
        self._check_ip(ip)
        return int(eng.distinct_count(self.arrays, ip))

    def entry(self, ip: int) -> PoolEntry:
        self._check_ip(ip)
        a = self.arrays
        holder = int(a.holder[ip])
        released = int(a.released[ip])
        tag = int(a.tag[ip])
        prior = None
        if self.exact:
            words = a.bits[ip]
            bits = np.unpackbits(words.view(np.uint8), bitorder="little")
            prior = frozenset(np.flatnonzero(bits).tolist())
        return PoolEntry(
            ip=ip,
            state=Allocated(holder, int(a.acquired[ip])) if holder >= 0 else None,
            last_release_time=None if released == eng.NEVER else released,
            tag_tenant=None if tag < 0 else tag,
            prior_tenants=prior,
            prior_tenant_count=self.prior_tenant_count(ip),
        )
