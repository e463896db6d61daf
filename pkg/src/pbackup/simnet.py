"""Availability schedules, site topology and bandwidth-limited transfer timing."""
from __future__ import annotations

import bisect
import csv
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .model import PeerId

INF = math.inf


class AvailabilitySchedule:
    """Sorted, disjoint ``[start, end)`` online intervals of one peer."""

    __slots__ = ("starts", "ends")

    def __init__(self, intervals: Iterable[tuple[float, float]] = ()):
        merged: list[list[float]] = []
        for s, e in sorted((float(s), float(e)) for s, e in intervals):
            if e <= s:
                continue
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        self.starts = [m[0] for m in merged]
        self.ends = [m[1] for m in merged]

    @classmethod
    def always(cls, until: float = INF) -> "AvailabilitySchedule":
        return cls([(0.0, until)])

    def __len__(self) -> int:
        return len(self.starts)

    def __eq__(self, other) -> bool:
        return isinstance(other, AvailabilitySchedule) and self.intervals() == other.intervals()

    def intervals(self) -> list[tuple[float, float]]:
        return list(zip(self.starts, self.ends))

    def _idx(self, t: float) -> int:
        """Index of the interval containing t, or -1."""
        i = bisect.bisect_right(self.starts, t) - 1
        if i >= 0 and t < self.ends[i]:
            return i
        return -1

    def is_online(self, t: float) -> bool:
        return self._idx(t) >= 0

    def session_end(self, t: float) -> float:
        """End of the session containing t (t itself when offline)."""
        i = self._idx(t)
        return self.ends[i] if i >= 0 else t

    def next_online(self, t: float) -> float:
        """First instant >= t at which the peer is online (inf if never)."""
        if self._idx(t) >= 0:
            return t
        i = bisect.bisect_right(self.starts, t)
        return self.starts[i] if i < len(self.starts) else INF

    def next_change(self, t: float) -> float:
        i = self._idx(t)
        if i >= 0:
            return self.ends[i]
        return self.next_online(t)

    def online_time(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        total = 0.0
        i = max(bisect.bisect_right(self.starts, a) - 1, 0)
        while i < len(self.starts) and self.starts[i] < b:
            lo, hi = max(a, self.starts[i]), min(b, self.ends[i])
            if hi > lo:
                total += hi - lo
            i += 1
        return total

    def availability(self, a: float, b: float) -> float:
        return self.online_time(a, b) / (b - a) if b > a else 0.0

    def decayed_availability(self, now: float, window: float = 14 * 86400.0, decay_per_day: float = 0.9) -> float:
        """Uptime fraction over the trailing window, days weighted by decay**age."""
        start = max(0.0, now - window)
        num = den = 0.0
        t = now
        age = 0
        while t > start + 1e-9:
            lo = max(start, t - 86400.0)
            w = decay_per_day ** age
            num += w * self.online_time(lo, t)
            den += w * (t - lo)
            t = lo
            age += 1
        return num / den if den > 0 else 0.0


def intersect(a: AvailabilitySchedule, b: AvailabilitySchedule) -> AvailabilitySchedule:
    out = []
    i = j = 0
    while i < len(a.starts) and j < len(b.starts):
        lo, hi = max(a.starts[i], b.starts[j]), min(a.ends[i], b.ends[j])
        if hi > lo:
            out.append((lo, hi))
        if a.ends[i] < b.ends[j]:
            i += 1
        else:
            j += 1
    return AvailabilitySchedule(out)


def transfer_completion(start: float, nbytes: float, rate: float, *schedules: AvailabilitySchedule) -> float:
    """Time at which ``nbytes`` finish at ``rate`` counting only mutual online time.

    Independent integration oracle for the simulator's suspend/resume transfers.
    """
    if nbytes <= 0:
        return start
    need = nbytes / rate
    sched = schedules[0]
    for s in schedules[1:]:
        sched = intersect(sched, s)
    t = sched.next_online(start)
    while t < INF:
        end = sched.session_end(t)
        if end - t >= need:
            return t + need
        need -= end - t
        t = sched.next_online(end)
    return INF


def read_traces(path: str | Path) -> dict[PeerId, AvailabilitySchedule]:
    raw: dict[PeerId, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            raw.setdefault(PeerId.from_hex(row["peer_id"]), []).append(
                (float(row["start_seconds"]), float(row["end_seconds"])))
    return {p: AvailabilitySchedule(iv) for p, iv in raw.items()}


def write_traces(path: str | Path, traces: Mapping[PeerId, AvailabilitySchedule]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["peer_id", "start_seconds", "end_seconds"])
        for p in sorted(traces):
            for s, e in traces[p].intervals():
                w.writerow([p.hex(), repr(s), repr(e)])


class TopologyError(KeyError):
    pass


@dataclass
class Topology:
    sites: dict[PeerId, str] = field(default_factory=dict)
    matrix: dict[tuple[str, str], float] = field(default_factory=dict)

    def set_distance(self, a: str, b: str, d: float) -> None:
        self.matrix[(a, b)] = d
        self.matrix[(b, a)] = d

    def site_distance(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        try:
            return self.matrix[(a, b)]
        except KeyError:
            raise TopologyError(f"no distance between sites {a!r} and {b!r}") from None

    def labels(self) -> list[str]:
        return sorted({s for pair in self.matrix for s in pair} | set(self.sites.values()))


def ttl_distance(a: PeerId, b: PeerId, topo: Topology) -> float:
    if a == b:
        return 0.0
    try:
        sa, sb = topo.sites[a], topo.sites[b]
    except KeyError as e:
        raise TopologyError(f"peer {PeerId(e.args[0]).short} has no site label") from None
    return topo.site_distance(sa, sb)


def read_topology(path: str | Path, sites: Mapping[PeerId, str] | None = None) -> Topology:
    """Square CSV matrix: header ``site,<label>...``, one row per site."""
    topo = Topology(dict(sites or {}))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    for row in rows[1:]:
        a = row[0]
        for b, val in zip(labels, row[1:]):
            d = float(val)
            if a == b and d != 0:
                raise ValueError(f"site {a!r}: diagonal must be zero")
            prev = topo.matrix.get((b, a))
            if prev is not None and prev != d:
                raise ValueError(f"asymmetric distance between {a!r} and {b!r}")
            topo.matrix[(a, b)] = d
    return topo


def write_topology(path: str | Path, topo: Topology) -> None:
    labels = topo.labels()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["site", *labels])
        for a in labels:
            w.writerow([a, *(repr(topo.site_distance(a, b)) for b in labels)])
