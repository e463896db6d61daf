"""Synchro-peer delivery sweep.

Messages with random source, destination and send instant are injected over
fixed availability traces, independently of any backup workload.  Each
message is simulated on its own with real :class:`SyncMessenger` instances:
every holder retries its pending peers on its relay tick while both are
online.

Per message we record
* whether it reached some peer other than the sender (the target or one of
  its synchro-peers) before the sender's session ended, i.e. whether it
  survives a sender that never comes back;
* the time of execution at the target, measured from the target's first
  online instant after the send.
"""
from __future__ import annotations

import heapq
import math
import random
import statistics
from dataclasses import dataclass, field

from ..messaging import Outcome, SyncMessenger
from ..model import PeerId
from ..simnet import AvailabilitySchedule, intersect

INF = math.inf


@dataclass(frozen=True)
class SweepParams:
    synchro_counts: tuple[int, ...] = (0, 1, 3, 5, 10)
    messages: int = 20000
    relay_tick: float = 60.0
    latency: float = 0.05
    send_window: tuple[float, float] | None = None  # defaults to the first 60% of the trace
    seed: int = 0


@dataclass
class MessageResult:
    synchro: int
    sent_at: float
    reached_other: float  # first delivery to a non-sender peer, inf if never
    sender_session_end: float
    executed_at: float
    receiver_online_at: float

    @property
    def survived(self) -> bool:
        return self.reached_other <= self.sender_session_end

    @property
    def receiver_delay(self) -> float:
        return self.executed_at - self.receiver_online_at


@dataclass
class SweepRow:
    synchro: int
    messages: int
    delivery_probability: float
    probability_std: float
    executed_fraction: float
    mean_delay: float
    std_delay: float


class _Overlaps:
    """Cached pairwise mutual-online schedules."""

    def __init__(self, traces: dict[PeerId, AvailabilitySchedule]):
        self.traces = traces
        self._cache: dict[tuple[PeerId, PeerId], AvailabilitySchedule] = {}

    def pair(self, a: PeerId, b: PeerId) -> AvailabilitySchedule:
        key = (a, b) if a < b else (b, a)
        s = self._cache.get(key)
        if s is None:
            s = self._cache[key] = intersect(self.traces[a], self.traces[b])
        return s


def _next_tick(t: float, phase: float, tick: float) -> float:
    k = math.ceil((t - phase) / tick - 1e-12)
    return phase + k * tick


def _next_contact(ov: AvailabilitySchedule, t: float, phase: float, tick: float, latency: float) -> float:
    """First tick instant >= t at which both ends stay online for ``latency``."""
    while True:
        s = ov.next_online(t)
        if s == INF:
            return INF
        end = ov.session_end(s)
        at = _next_tick(s, phase, tick)
        if at + latency < end:
            return at
        t = end


def synchro_sets(peers: list[PeerId], max_count: int, rng: random.Random) -> dict[PeerId, list[PeerId]]:
    """Per-peer random ordering of the others; the first S form the S-peer set (nested in S)."""
    out = {}
    for p in peers:
        others = [q for q in peers if q != p]
        rng.shuffle(others)
        out[p] = others[:max_count]
    return out


def simulate_message(src: PeerId, dst: PeerId, t0: float, synchro: list[PeerId], traces, overlaps: _Overlaps,
                     phases: dict[PeerId, float], tick: float, latency: float, horizon: float) -> MessageResult:
    members = [dst] + [p for p in synchro if p != dst]
    nodes: dict[PeerId, SyncMessenger] = {src: SyncMessenger(src)}
    msg, attempts = nodes[src].send_async(dst, {"probe": 1}, members)
    reached_other = INF
    executed = INF
    heap: list[tuple[float, bytes, PeerId]] = []
    scheduled: dict[PeerId, float] = {}

    def deliver(holder: PeerId, pairs, t: float) -> None:
        nonlocal reached_other, executed
        for peer, m in pairs:
            ts = traces[peer]
            if not (ts.is_online(t) and ts.is_online(t + latency)):
                continue
            node = nodes.get(peer)
            if node is None:
                node = nodes[peer] = SyncMessenger(peer)
            outcome, _ = node.on_receive(m)
            nodes[holder].on_send_result(peer, m, True)
            if peer != src:
                reached_other = min(reached_other, t + latency)
            if outcome is Outcome.EXECUTED:
                executed = t + latency

    def reschedule(holder: PeerId, t: float) -> None:
        node = nodes[holder]
        pending = node.state.pending.get(msg.pair)
        if pending is None:
            return
        nxt = INF
        for peer in pending.pending_set:
            nxt = min(nxt, _next_contact(overlaps.pair(holder, peer), t, phases[holder], tick, latency))
        if nxt < horizon and scheduled.get(holder) != nxt:
            scheduled[holder] = nxt
            heapq.heappush(heap, (nxt, holder, holder))

    deliver(src, attempts, t0)
    for h in list(nodes):
        reschedule(h, t0 + 1e-9)
    while heap and executed == INF:
        t, _, holder = heapq.heappop(heap)
        if scheduled.get(holder) != t:
            continue
        del scheduled[holder]
        before = set(nodes)
        deliver(holder, nodes[holder].relay_tick(), t)
        for h in list(nodes):
            if h == holder or h not in before:
                reschedule(h, t + 1e-9)
        reschedule(holder, t + 1e-9)
    return MessageResult(len(synchro), t0, reached_other, traces[src].session_end(t0), executed,
                         traces[dst].next_online(t0))


def _random_online_instant(sched: AvailabilitySchedule, lo: float, hi: float, rng: random.Random) -> float | None:
    total = sched.online_time(lo, hi)
    if total <= 0:
        return None
    x = rng.uniform(0, total)
    for s, e in sched.intervals():
        a, b = max(s, lo), min(e, hi)
        if b <= a:
            continue
        if x <= b - a:
            return a + x
        x -= b - a
    return None


def run_sweep(traces: dict[PeerId, AvailabilitySchedule], params: SweepParams, horizon: float
              ) -> dict[int, list[MessageResult]]:
    rng = random.Random(params.seed)
    peers = sorted(traces)
    sets = synchro_sets(peers, max(params.synchro_counts), rng)
    phases = {p: rng.uniform(0, params.relay_tick) for p in peers}
    lo, hi = params.send_window or (0.0, 0.6 * horizon)
    workload = []
    senders = [p for p in peers if traces[p].online_time(lo, hi) > 0]
    while len(workload) < params.messages:
        src, dst = rng.choice(senders), rng.choice(peers)
        if src == dst:
            continue
        t0 = _random_online_instant(traces[src], lo, hi, rng)
        workload.append((src, dst, t0))
    overlaps = _Overlaps(traces)
    results = {}
    for s in params.synchro_counts:
        results[s] = [simulate_message(src, dst, t0, sets[dst][:s], traces, overlaps, phases,
                                       params.relay_tick, params.latency, horizon)
                      for src, dst, t0 in workload]
    return results


def _batch_std(flags: list[float], batches: int = 20) -> float:
    n = len(flags) // batches
    if n == 0:
        return 0.0
    means = [sum(flags[i * n:(i + 1) * n]) / n for i in range(batches)]
    return statistics.pstdev(means)


def report_synchro_experiment(results: dict[int, list[MessageResult]]) -> list[SweepRow]:
    rows = []
    for s in sorted(results):
        res = results[s]
        flags = [1.0 if r.survived else 0.0 for r in res]
        delays = [r.receiver_delay for r in res if r.executed_at < INF]
        rows.append(SweepRow(
            s, len(res), sum(flags) / len(res), _batch_std(flags),
            len(delays) / len(res),
            statistics.fmean(delays) if delays else INF,
            statistics.pstdev(delays) if len(delays) > 1 else 0.0))
    return rows
