"""Tenant/adversary simulation over a shared IP pool.

Every ``tick`` seconds each tenant (in a freshly shuffled order) draws a new
quota uniformly from ``0..quota_max`` and releases or allocates IPs to meet
it.  The adversary then releases whatever it has held for at least
``adversary_hold`` seconds and tops itself back up to ``adversary_quota``.
Each adversary acquisition records

* how many distinct non-adversary tenants have held that IP, and
* how long ago a non-adversary tenant last released it.

The adversary joins after ``warmup`` seconds of tenant-only churn.  With
``warmup_until_cycled`` it also waits until every IP in the pool has been held
at least once; under Tagging at moderate load that never happens, since
tenants keep reusing their own addresses.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import _engine as eng
from .pool import DistinctMode, Pool, PoolConfig, Policy

log = logging.getLogger(__name__)


class ConfigInvalid(ValueError):
    pass


class EmptyMetrics(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    pool: PoolConfig = field(default_factory=lambda: PoolConfig(673_000, 1800, Policy.TAGGING))
    n_tenants: int = 100_000
    tick: int = 600
    quota_max: int = 3
    adversary_quota: int = 60
    adversary_hold: int = 600
    adversary_target_allocations: int = 581_000
    duration: int | None = None
    warmup: int = 86_400
    warmup_until_cycled: bool = False
    seed: int = 0
    distinct: DistinctMode = DistinctMode.AUTO

    def __post_init__(self) -> None:
        object.__setattr__(self, "distinct", DistinctMode(self.distinct))
        if self.n_tenants <= 0:
            raise ConfigInvalid("n_tenants must be positive")
        if self.tick <= 0:
            raise ConfigInvalid("tick must be positive")
        if self.quota_max < 0:
            raise ConfigInvalid("quota_max must be non-negative")
        if self.adversary_quota < 0 or self.adversary_target_allocations < 0:
            raise ConfigInvalid("adversary quota and target must be non-negative")
        if self.adversary_hold < self.tick:
            raise ConfigInvalid("adversary_hold must be at least one tick")
        if self.warmup < 0:
            raise ConfigInvalid("warmup must be non-negative")
        if self.duration is not None and self.duration <= 0:
            raise ConfigInvalid("duration must be positive")
        if self.duration is None and (self.adversary_quota == 0 or self.adversary_target_allocations == 0):
            raise ConfigInvalid("without a duration the adversary must have a reachable target")
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalid("seed must fit in 64 bits")

    @property
    def adversary(self) -> int:
        return self.n_tenants

    def with_policy(self, policy: Policy | str) -> SimConfig:
        return replace(self, pool=replace(self.pool, policy=Policy(policy)))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["pool"]["policy"] = self.pool.policy.value
        d["distinct"] = self.distinct.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SimConfig:
        d = dict(d)
        pool = d.pop("pool", None)
        unknown = set(d) - {f for f in cls.__dataclass_fields__ if f != "pool"}
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        try:
            if pool is not None:
                pool = pool if isinstance(pool, PoolConfig) else PoolConfig(**pool)
                d["pool"] = pool
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc


PRESETS: dict[str, SimConfig] = {
    "paper-useast1a": SimConfig(),
    "desk": SimConfig(
        pool=PoolConfig(10_000, 1800, Policy.TAGGING),
        n_tenants=2_000,
        quota_max=1,
        adversary_quota=20,
        adversary_target_allocations=20_000,
    ),
}


@dataclass
class AdversaryMetrics:
    unique_ips: int
    prev_tenant_counts: np.ndarray
    reuse_intervals: np.ndarray  # only acquisitions of previously tenant-held IPs

    @property
    def acquisitions(self) -> int:
        return len(self.prev_tenant_counts)


@dataclass(frozen=True)
class Summary:
    unique_ips: int
    mean_prev_tenants: float
    median_reuse: int | None


def lower_median(values) -> Any:
    s = np.sort(np.asarray(values))
    return s[(len(s) - 1) // 2].item()


def summarize(metrics: AdversaryMetrics) -> Summary:
    if metrics.acquisitions == 0:
        raise EmptyMetrics("no adversary acquisitions recorded")
    mean = math.fsum(metrics.prev_tenant_counts.tolist()) / metrics.acquisitions
    median = lower_median(metrics.reuse_intervals) if len(metrics.reuse_intervals) else None
    return Summary(metrics.unique_ips, mean, median)


@dataclass
class Trace:
    """Allocation events in the order they happened."""

    kind: np.ndarray  # 0 allocate, 1 release
    time: np.ndarray
    ip: np.ndarray
    tenant: np.ndarray

    EVENT_NAMES = ("allocate", "release")

    def __len__(self) -> int:
        return len(self.kind)

    def rows(self):
        names = self.EVENT_NAMES
        for k, t, ip, tenant in zip(self.kind.tolist(), self.time.tolist(), self.ip.tolist(), self.tenant.tolist()):
            yield names[k], t, ip, tenant


@dataclass
class SimReport:
    config: SimConfig
    metrics: AdversaryMetrics
    summary: Summary
    ticks: int
    completed: bool
    tenant_exhaustions: int
    adversary_exhaustions: int
    tenant_allocations: int
    tenant_releases: int
    trace: Trace | None = None
    wall_seconds: float = 0.0

    def to_dict(self, include_raw: bool = False) -> dict[str, Any]:
        s = self.summary
        d: dict[str, Any] = {
            "config": self.config.to_dict(),
            "policy": self.config.pool.policy.value,
            "summary": {
                "unique_ips": s.unique_ips,
                "mean_prev_tenants": s.mean_prev_tenants,
                "median_reuse": s.median_reuse,
            },
            "adversary_allocations": self.metrics.acquisitions,
            "reuse_samples": len(self.metrics.reuse_intervals),
            "ticks": self.ticks,
            "completed": self.completed,
            "tenant_exhaustions": self.tenant_exhaustions,
            "adversary_exhaustions": self.adversary_exhaustions,
            "tenant_allocations": self.tenant_allocations,
            "tenant_releases": self.tenant_releases,
        }
        if include_raw:
            d["prev_tenant_counts"] = self.metrics.prev_tenant_counts.tolist()
            d["reuse_intervals"] = self.metrics.reuse_intervals.tolist()
        return d


class Simulation:
    """Mutable simulation state: one pool, ``n_tenants`` tenants and one adversary."""

    def __init__(self, config: SimConfig, trace: bool = False) -> None:
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.pool = Pool(config.pool, config.n_tenants + 1, self.rng, config.distinct)
        p = config.pool.pool_size
        t = config.n_tenants
        self.sim = eng.SimArrays(
            held=np.zeros((t, max(config.quota_max, 1)), np.int32),
            held_n=np.zeros(t, np.int32),
            order=np.arange(t, dtype=np.int32),
            adv_ips=np.zeros(max(config.adversary_quota, 1), np.int32),
            adv_acq=np.zeros(max(config.adversary_quota, 1), np.int64),
            other_rel=np.full(p, eng.NEVER, np.int64),
            adv_seen=np.zeros(p, np.uint8),
            prev_counts=np.zeros(config.adversary_target_allocations, np.int32),
            intervals=np.zeros(config.adversary_target_allocations, np.int64),
            scal=np.zeros(eng.N_ASCAL, np.int64),
        )
        params = np.zeros(eng.N_PARAMS, np.int64)
        params[eng.P_TICK] = config.tick
        params[eng.P_QUOTA_MAX] = config.quota_max
        params[eng.P_ADV_QUOTA] = config.adversary_quota
        params[eng.P_ADV_HOLD] = config.adversary_hold
        params[eng.P_TARGET] = config.adversary_target_allocations
        params[eng.P_WARMUP] = config.warmup
        params[eng.P_ADVERSARY] = config.adversary
        params[eng.P_DURATION] = -1 if config.duration is None else config.duration
        params[eng.P_WAIT_CYCLE] = int(config.warmup_until_cycled)
        self.params = params
        self.tracing = trace
        cap = self._per_tick_events() * 64 if trace else 1
        self._trace_bufs = [
            np.zeros(cap, np.int8),
            np.zeros(cap, np.int64),
            np.zeros(cap, np.int32),
            np.zeros(cap, np.int32),
        ]
        self.next_tick = 0

    def _per_tick_events(self) -> int:
        c = self.config
        return 2 * c.n_tenants * c.quota_max + 2 * c.adversary_quota

    def _ensure_trace_room(self, ticks: int) -> None:
        need = int(self.sim.scal[eng.A_TRACE_N]) + ticks * self._per_tick_events()
        cap = len(self._trace_bufs[0])
        if need > cap:
            new = max(need, 2 * cap)
            self._trace_bufs = [np.concatenate([b, np.zeros(new - cap, b.dtype)]) for b in self._trace_bufs]

    @property
    def adversary_active(self) -> bool:
        return bool(self.sim.scal[eng.A_ACTIVE])

    @property
    def adversary_allocations(self) -> int:
        return int(self.sim.scal[eng.A_ALLOCS])

    @property
    def adversary_held(self) -> list[tuple[int, int]]:
        n = int(self.sim.scal[eng.A_ADV_N])
        return list(zip(self.sim.adv_ips[:n].tolist(), self.sim.adv_acq[:n].tolist()))

    def held(self, tenant: int) -> list[int]:
        return self.sim.held[tenant, : self.sim.held_n[tenant]].tolist()

    def tick(self, now: int) -> None:
        """Run a single tick at time ``now`` (a multiple of the tick length)."""
        if now % self.config.tick:
            raise ValueError(f"{now} is not a multiple of the tick length {self.config.tick}")
        if self.tracing:
            self._ensure_trace_room(1)
        eng.run_tick(self.rng, self.pool.arrays, self.sim, self.params, int(now), *self._trace_bufs, self.tracing)
        self.next_tick = now // self.config.tick + 1

    def max_ticks(self) -> int:
        c = self.config
        if c.duration is not None:
            return math.ceil(c.duration / c.tick)
        active = math.ceil(c.adversary_target_allocations / c.adversary_quota)
        # generous bound; a run that hits it reports completed=False
        return math.ceil(c.warmup / c.tick) + 20 * active + 100

    def run(self, chunk: int = 500) -> SimReport:
        c = self.config
        started = time.perf_counter()
        limit = self.max_ticks()
        while self.next_tick < limit:
            n = min(chunk, limit - self.next_tick)
            if self.tracing:
                self._ensure_trace_room(n)
            done = eng.run_ticks(
                self.rng, self.pool.arrays, self.sim, self.params, self.next_tick, n, *self._trace_bufs, self.tracing
            )
            self.next_tick += done
            if done < n:
                break
            log.debug("tick %d, adversary allocations %d", self.next_tick, self.adversary_allocations)
        return self.report(time.perf_counter() - started)

    def metrics(self) -> AdversaryMetrics:
        n = self.adversary_allocations
        intervals = self.sim.intervals[:n]
        return AdversaryMetrics(
            unique_ips=int(self.sim.scal[eng.A_UNIQUE]),
            prev_tenant_counts=self.sim.prev_counts[:n].copy(),
            reuse_intervals=intervals[intervals >= 0].copy(),
        )

    def trace(self) -> Trace | None:
        if not self.tracing:
            return None
        n = int(self.sim.scal[eng.A_TRACE_N])
        kind, tm, ip, tenant = (b[:n].copy() for b in self._trace_bufs)
        return Trace(kind, tm, ip, tenant)

    def report(self, wall_seconds: float = 0.0) -> SimReport:
        m = self.metrics()
        s = self.sim.scal
        completed = self.adversary_allocations >= self.config.adversary_target_allocations
        if self.config.duration is not None:
            completed = completed or self.next_tick * self.config.tick >= self.config.duration
        return SimReport(
            config=self.config,
            metrics=m,
            summary=summarize(m) if m.acquisitions else Summary(0, 0.0, None),
            ticks=int(s[eng.A_TICKS]),
            completed=bool(completed),
            tenant_exhaustions=int(s[eng.A_EXHAUST]),
            adversary_exhaustions=int(s[eng.A_ADV_EXHAUST]),
            tenant_allocations=int(s[eng.A_TENANT_ALLOCS]),
            tenant_releases=int(s[eng.A_TENANT_RELEASES]),
            trace=self.trace(),
            wall_seconds=wall_seconds,
        )


def tick(sim: Simulation, now: int) -> None:
    sim.tick(now)


def run(config: SimConfig, trace: bool = False) -> SimReport:
    sim = Simulation(config, trace=trace)
    report = sim.run()
    log.info(
        "%s: %d ticks, %d adversary allocations in %.1fs",
        config.pool.policy.value,
        report.ticks,
        report.metrics.acquisitions,
        report.wall_seconds,
    )
    return report
