"""Synthetic availability traces.

``lab``: machines run only while the lab is open (Mon-Fri 08:30-20:00,
Sat 09:00-14:30; t=0 is Monday 00:00).  Long sessions, often a whole day,
then days or weeks switched off.
``planetlab``: nearly always on, with random outages.

Per-peer availability targets are drawn from a Beta distribution and
rescaled so their mean hits the requested value; sessions are then placed
until each peer's online time matches its own target exactly.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass

from ..model import PeerId
from ..simnet import AvailabilitySchedule

DAY = 86400.0
WEEK = 7 * DAY

# (weekday, open, close) in seconds since midnight
LAB_HOURS = [(d, 8.5 * 3600, 20 * 3600) for d in range(5)] + [(5, 9 * 3600, 14.5 * 3600)]


class InfeasibleTraceParams(ValueError):
    pass


@dataclass(frozen=True)
class TraceParams:
    profile: str = "lab"  # "lab" | "planetlab" | "always"
    mean_availability: float = 0.13
    spread: float = 6.0  # Beta concentration; larger means more homogeneous peers
    min_availability: float = 0.02
    session_median: float = 4 * 3600.0
    session_sigma: float = 0.8
    outage_median: float = 1800.0  # planetlab outages


def lab_windows(start: float, end: float) -> list[tuple[float, float]]:
    out = []
    week = math.floor(start / WEEK)
    while week * WEEK < end:
        for day, lo, hi in LAB_HOURS:
            a, b = week * WEEK + day * DAY + lo, week * WEEK + day * DAY + hi
            a, b = max(a, start), min(b, end)
            if b > a:
                out.append((a, b))
        week += 1
    return out


def _targets(n: int, p: TraceParams, cap: float, rng: random.Random) -> list[float]:
    m = p.mean_availability
    if m > cap + 1e-12:
        raise InfeasibleTraceParams(f"mean availability {m:.3f} exceeds the open-window fraction {cap:.3f}")
    if m >= cap - 1e-12:
        return [cap] * n
    lo = min(p.min_availability, m)
    raw = [rng.betavariate(p.spread * m, p.spread * (1 - m)) for _ in range(n)]
    # clip, then rescale the free part until the mean matches
    t = [min(max(x, lo), cap) for x in raw]
    for _ in range(100):
        mean = sum(t) / n
        if abs(mean - m) < 1e-9:
            break
        if mean > m:
            f = (m - lo) / (mean - lo) if mean > lo else 0.0
            t = [lo + (x - lo) * f for x in t]
        else:
            f = (cap - m) / (cap - mean)
            t = [cap - (cap - x) * f for x in t]
    return t


def _fill(windows: list[tuple[float, float]], need: float, p: TraceParams, median: float,
          rng: random.Random) -> list[tuple[float, float]]:
    """Place lognormal sessions inside ``windows`` until exactly ``need`` seconds are covered."""
    if need <= 0 or not windows:
        return []
    total = sum(b - a for a, b in windows)
    if need >= total - 1e-6:
        return list(windows)
    # free[i] = list of uncovered sub-intervals of window i
    free = [[w] for w in windows]
    covered = 0.0
    out = []
    mu = math.log(median)
    while covered < need - 1e-6:
        i = rng.randrange(len(windows))
        if not free[i]:
            continue
        a, b = free[i][rng.randrange(len(free[i]))]
        dur = min(rng.lognormvariate(mu, p.session_sigma), need - covered)
        start = rng.uniform(a, max(a, b - dur)) if rng.random() < 0.5 else a
        end = min(b, start + dur)
        if end <= start:
            continue
        out.append((start, end))
        covered += end - start
        rest = [iv for iv in free[i] if iv != (a, b)]
        if start > a:
            rest.append((a, start))
        if end < b:
            rest.append((end, b))
        free[i] = rest
    return out


def _complement(intervals: list[tuple[float, float]], start: float, end: float) -> list[tuple[float, float]]:
    out, t = [], start
    for a, b in sorted(intervals):
        if a > t:
            out.append((t, a))
        t = max(t, b)
    if t < end:
        out.append((t, end))
    return out


def synthesize_traces(peers: list[PeerId], params: TraceParams, duration: float, seed: int,
                      start: float = 0.0) -> dict[PeerId, AvailabilitySchedule]:
    """Schedules over ``[start, start + duration)`` with exact mean availability."""
    if duration <= 0:
        raise InfeasibleTraceParams("duration must be positive")
    if not 0 <= params.mean_availability <= 1:
        raise InfeasibleTraceParams("mean availability must lie in [0, 1]")
    rng = random.Random(seed)
    end = start + duration
    if params.profile == "always" or params.mean_availability >= 1.0:
        if params.profile == "lab":
            raise InfeasibleTraceParams("lab machines cannot be always on")
        return {p: AvailabilitySchedule([(start, end)]) for p in peers}
    if params.profile == "lab":
        windows = lab_windows(start, end)
        cap = sum(b - a for a, b in windows) / duration
        targets = _targets(len(peers), params, cap, rng)
        return {p: AvailabilitySchedule(_fill(windows, a * duration, params, params.session_median, rng))
                for p, a in zip(peers, targets)}
    if params.profile == "planetlab":
        targets = _targets(len(peers), params, 1.0, rng)
        out = {}
        for p, a in zip(peers, targets):
            down = _fill([(start, end)], (1 - a) * duration, params, params.outage_median, rng)
            out[p] = AvailabilitySchedule(_complement(down, start, end))
        return out
    raise InfeasibleTraceParams(f"unknown trace profile {params.profile!r}")


def mean_availability(traces: dict[PeerId, AvailabilitySchedule], start: float, end: float) -> float:
    return sum(s.availability(start, end) for s in traces.values()) / len(traces)
