"""Measurement harnesses and closed-form references for acceptance checks."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..model import ChunkId, PeerId, derive_peer_id
from ..optimizer import OptimizerConfig, QueueEntry, TabooList, WorstQueue, optimizer_tick
from ..utility import strictly_better
from .experiments import PlacementRun, spec_from_dict


def measure_proposal_rate(alpha: float, period_T: float, peers: int, periods: int, seed: int = 0) -> float:
    """Offers per second received by the owner at the head of every queue.

    Each of ``peers`` replicators ticks once per period at its own random phase
    and shares a queue whose worst chunk belongs to a single owner.
    """
    rng = random.Random(seed)
    cfg = OptimizerConfig(alpha=alpha, period_T=period_T, N_est=peers)
    owner = derive_peer_id(b"rate-owner")
    queue = WorstQueue(4, [QueueEntry(ChunkId(owner, 0), -1e6, 0.0, 1)])
    taboo = TabooList()
    me = [derive_peer_id(f"rate-peer-{i}".encode()) for i in range(peers)]
    rngs = [random.Random(rng.randrange(2**32)) for _ in me]
    offers = 0
    for k in range(periods):
        for p, r in zip(me, rngs):
            if optimizer_tick(p, 1 << 40, queue, taboo, r, k * period_T, cfg) is not None:
                offers += 1
    return offers / (periods * period_T)


def pipeline_bound(chunks_per_node: int, chunk_size: float, bandwidth: float, n_r: int, ordinal: int) -> float:
    """Expected time for a modified chunk to reach its ``ordinal``-th replica.

    Every node re-downloads ``n_r * chunks_per_node`` chunks a day at ``bandwidth``
    with uncontended sources, serving its queue in random order.  A chunk's
    replicas sit at independent uniform queue positions, so the ordinal-th replica
    lands at the ordinal-th smallest of ``n_r`` positions.
    """
    if not 1 <= ordinal <= n_r:
        raise ValueError("ordinal must lie in 1..n_r")
    m = n_r * chunks_per_node
    slot = chunk_size / bandwidth

    def at_least(j: int) -> float:  # P(k-th order statistic <= j)
        q = j / m
        return sum(math.comb(n_r, i) * q**i * (1 - q) ** (n_r - i) for i in range(ordinal, n_r + 1))

    return slot * sum(j * (at_least(j) - at_least(j - 1)) for j in range(1, m + 1))


HILL_CLIMB_SPEC = {
    "name": "hill_climb_static",
    "kind": "placement",
    "nodes": 16,
    "duration_days": 1,
    "warmup_days": 0,
    "traces": {"profile": "always"},
    "topology": {"kind": "regions", "regions": 2, "sites_per_region": 4,
                 "intra_region": [1, 2], "inter_region": [3, 8]},
    "data": {"chunks_per_node": [3, 3], "chunk_size": 50_000_000, "storage": [[2_000_000_000, 1.0]],
             "bandwidth": [1_000_000], "modify_daily": False},
    "policy": {"N_r": 3, "Des_Tb": 86400, "Des_Tr": 86400, "close_max": 1, "remote_min": 3, "remote_max": 8},
    "optimizer": {"alpha": 0.05, "period_T": 120},
}


@dataclass
class HillClimbTrace:
    epochs: list[float] = field(default_factory=list)
    min_utility: list[float] = field(default_factory=list)
    accepted: list[tuple[str, float, float]] = field(default_factory=list)  # (kind, current, proposed)
    rejected: int = 0

    def monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.min_utility, self.min_utility[1:]))

    def band_violations(self, band: float) -> list:
        return [a for a in self.accepted if a[0] == "swap" and not strictly_better(a[2], a[1], band)]


def hill_climb_trace(seed: int = 0, epoch: float = 600.0, duration: float | None = None) -> HillClimbTrace:
    raw = dict(HILL_CLIMB_SPEC, seed=seed)
    if duration is not None:
        raw["duration_days"] = duration / 86400.0
    run = PlacementRun(spec_from_dict(raw))
    out = HillClimbTrace()
    inner = run.sim.on_note

    def on_note(peer, note, now):
        if note.kind == "offer_decision":
            kind = note.data["kind"]
            if kind == "reject":
                out.rejected += 1
            else:
                out.accepted.append((kind, note.data["current"], note.data["proposed"]))
        inner(peer, note, now)

    run.sim.on_note = on_note

    def snapshot(now):
        utils = [n.chunk_utility(c, now) for n in run.nodes.values() for c in n.catalog.entries]
        out.epochs.append(now)
        out.min_utility.append(min(u for u in utils if u is not None))

    n = int(run.spec.duration // epoch)
    run.extra_hooks = [(run.start + k * epoch, snapshot) for k in range(1, n + 1)]
    run.run()
    return out
