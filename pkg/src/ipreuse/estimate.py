"""Capture-recapture estimation of pool size, plus reuse-interval statistics.

Observations of IPs are bucketed into sampling occasions and fed to the
Jolly-Seber open-population estimator with the Chapman small-sample
correction.  For occasion ``i`` (1-based, interior only)::

    M_i = m_i + (R_i + 1) * z_i / (r_i + 1)
    N_i = (n_i + 1) * M_i / (m_i + 1) - 1

where ``n`` is the number caught, ``m`` the number of those already marked,
``R`` the number released (everyone caught is released), ``r`` the number of
those released that are caught again later, and ``z`` the number marked
before ``i``, missed at ``i`` and caught again after ``i``.  ``N_i`` is floored
at ``n_i`` since fewer individuals than were seen cannot be present.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Hashable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EstimateError(ValueError):
    pass


class EmptyLog(EstimateError):
    pass


class TooFewOccasions(EstimateError):
    pass


class NoReuseEvents(EstimateError):
    pass


Observation = tuple[Hashable, float]


def load_observations(path: str | Path) -> list[Observation]:
    """Read ``ip,timestamp_seconds`` lines; ``#`` starts a comment."""
    out: list[Observation] = []
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise EstimateError(f"{path}:{lineno}: expected 'ip,timestamp'")
            try:
                out.append((parts[0], float(parts[1])))
            except ValueError:
                raise EstimateError(f"{path}:{lineno}: bad timestamp {parts[1]!r}") from None
    return out


@dataclass(frozen=True)
class CaptureHistory:
    individuals: tuple[Hashable, ...]
    matrix: np.ndarray  # bool, individuals x occasions
    first_occasion: int = 0

    @property
    def occasions(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_rows(cls, rows: Sequence[str | Sequence[int]]) -> CaptureHistory:
        """Build from strings such as ``"101"`` or 0/1 sequences."""
        mat = np.array([[int(c) for c in r] for r in rows], dtype=bool)
        return cls(tuple(range(len(rows))), mat)


def build_history(log: Iterable[Observation], occasion_length: float) -> CaptureHistory:
    """Bucket observations into occasions of ``occasion_length`` seconds.

    Occasion indices are ``floor(t / occasion_length)`` shifted so the earliest
    observation falls in column 0.  Individuals are ordered by first sighting,
    ties by their string form.
    """
    if occasion_length <= 0:
        raise ValueError("occasion_length must be positive")
    seen: dict[Hashable, set[int]] = {}
    first: dict[Hashable, float] = {}
    for ind, t in log:
        occ = math.floor(t / occasion_length)
        seen.setdefault(ind, set()).add(occ)
        if ind not in first or t < first[ind]:
            first[ind] = t
    if not seen:
        raise EmptyLog("observation log is empty")
    lo = min(min(s) for s in seen.values())
    hi = max(max(s) for s in seen.values())
    order = sorted(seen, key=lambda k: (first[k], str(k)))
    mat = np.zeros((len(order), hi - lo + 1), dtype=bool)
    for row, ind in enumerate(order):
        mat[row, [o - lo for o in seen[ind]]] = True
    return CaptureHistory(tuple(order), mat, lo)


@dataclass(frozen=True)
class OccasionEstimate:
    occasion: int  # 1-based
    n: int
    m: int
    u: int
    R: int
    r: int
    z: int
    M_hat: float | None
    N_hat: float | None


def jolly_seber(history: CaptureHistory) -> list[OccasionEstimate]:
    mat = history.matrix
    T = history.occasions
    if T < 3:
        raise TooFewOccasions(f"need at least 3 occasions, got {T}")
    caught = mat.astype(np.int64)
    # before[k, i]: caught at some occasion < i; after[k, i]: caught at some occasion > i
    before = np.zeros_like(mat)
    before[:, 1:] = np.cumsum(caught, axis=1)[:, :-1] > 0
    after = np.zeros_like(mat)
    after[:, :-1] = np.cumsum(caught[:, ::-1], axis=1)[:, ::-1][:, 1:] > 0

    out = []
    for i in range(T):
        col = mat[:, i]
        n = int(col.sum())
        m = int((col & before[:, i]).sum())
        R = n
        r = int((col & after[:, i]).sum())
        z = int((~col & before[:, i] & after[:, i]).sum())
        M_hat = N_hat = None
        if 0 < i < T - 1:
            M_hat = m + (R + 1) * z / (r + 1)
            N_hat = max((n + 1) * M_hat / (m + 1) - 1, float(n))
        out.append(OccasionEstimate(i + 1, n, m, n - m, R, r, z, M_hat, N_hat))
    return out


def capture_rate(history: CaptureHistory) -> float:
    """Distinct individuals seen over the largest interior population estimate, capped at 1."""
    estimates = [e.N_hat for e in jolly_seber(history) if e.N_hat is not None]
    peak = max(estimates)
    if peak <= 0:
        raise EstimateError("no positive population estimate")
    return min(1.0, len(history) / peak)


@dataclass(frozen=True)
class ReuseStats:
    intervals: np.ndarray
    bin_width: float
    histogram: list[tuple[float, int]]  # (bin start, count), empty bins omitted
    median: float
    mean: float
    cv: float
    cooldown: float
    violations: int  # intervals shorter than the cooldown
    min_interval: float


def reuse_intervals(events: Iterable[tuple[str, float, Hashable]]) -> np.ndarray:
    """Allocation-minus-previous-release gaps from ``(event, time, ip)`` records.

    ``event`` is ``"allocate"`` or ``"release"``; allocations of IPs with no
    earlier release contribute nothing.
    """
    last_release: dict[Hashable, float] = {}
    gaps: list[float] = []
    for event, t, ip in events:
        if event == "release":
            last_release[ip] = t
        elif event == "allocate":
            prev = last_release.get(ip)
            if prev is not None:
                gaps.append(t - prev)
        else:
            raise EstimateError(f"unknown event type {event!r}")
    return np.asarray(gaps, dtype=float)


def reuse_stats(
    events: Iterable[tuple[str, float, Hashable]], bin_width: float = 600.0, cooldown: float = 1800.0
) -> ReuseStats:
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    iv = reuse_intervals(events)
    if len(iv) == 0:
        raise NoReuseEvents("trace has no release followed by a re-allocation")
    bins = np.floor(iv / bin_width).astype(np.int64)
    keys, counts = np.unique(bins, return_counts=True)
    mean = float(iv.mean())
    return ReuseStats(
        intervals=iv,
        bin_width=bin_width,
        histogram=[(float(k * bin_width), int(c)) for k, c in zip(keys, counts)],
        median=float(np.sort(iv)[(len(iv) - 1) // 2]),
        mean=mean,
        cv=float(iv.std() / mean) if mean > 0 else 0.0,
        cooldown=cooldown,
        violations=int((iv < cooldown).sum()),
        min_interval=float(iv.min()),
    )


def load_trace(path: str | Path) -> list[tuple[str, float, str, str]]:
    """Read an ``event,time,ip,tenant`` trace (header optional, ``#`` comments)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if line.strip() and not line.lstrip().startswith("#"))
        for lineno, rec in enumerate(reader, 1):
            if lineno == 1 and rec and rec[0] == "event":
                continue
            if len(rec) != 4:
                raise EstimateError(f"{path}: record {lineno}: expected event,time,ip,tenant")
            try:
                rows.append((rec[0], float(rec[1]), rec[2], rec[3]))
            except ValueError:
                raise EstimateError(f"{path}: record {lineno}: bad time {rec[1]!r}") from None
    return rows


def observations_from_trace(trace_rows: Iterable[tuple[str, float, str, str]], tenant: str) -> list[Observation]:
    """Treat one tenant's allocations as sightings, as a telescope operator would."""
    return [(ip, t) for event, t, ip, who in trace_rows if event == "allocate" and who == tenant]
