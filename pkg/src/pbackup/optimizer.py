"""Replicator-driven hill climbing toward max-min utility.

Peers gossip a bounded queue of the worst-scored chunks they know about.  A
peer with free space periodically, with probability ``p_p``, offers its
storage to the owner of the worst chunk it may still help.
"""
from __future__ import annotations

import random
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

from .model import ChunkId, PeerId


@dataclass(frozen=True)
class OptimizerConfig:
    alpha: float = 0.01
    period_T: float = 600.0
    N_est: int = 1
    queue_capacity: int = 32
    taboo_ttl: float = 6 * 3600.0
    fanout: int = 2
    max_entry_age: float = float("inf")

    def __post_init__(self):
        if self.alpha <= 0 or self.period_T <= 0:
            raise ValueError("alpha and period_T must be positive")
        if self.N_est < 1 or self.queue_capacity < 1:
            raise ValueError("N_est and queue_capacity must be at least 1")


def proposal_probability(cfg: OptimizerConfig) -> float:
    return min(1.0, cfg.period_T * cfg.alpha / cfg.N_est)


@dataclass(frozen=True)
class QueueEntry:
    chunk: ChunkId
    utility: float
    stamp: float
    size: int = 0
    version: int = 0

    @property
    def owner(self) -> PeerId:
        return self.chunk.owner

    def rank(self):
        return (self.utility, self.chunk)

    def freshness(self):
        return (self.stamp, -self.utility, self.version)

    def to_wire(self) -> list:
        return [str(self.chunk), self.utility, self.stamp, self.size, self.version]

    @classmethod
    def from_wire(cls, raw) -> "QueueEntry":
        chunk, utility, stamp, size, version = raw
        return cls(ChunkId.parse(chunk), float(utility), float(stamp), int(size), int(version))


class WorstQueue:
    """Fixed-capacity set of the lowest-utility chunks, freshest value per chunk."""

    def __init__(self, capacity: int, entries: Iterable[QueueEntry] = ()):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._entries: dict[ChunkId, QueueEntry] = {}
        for e in entries:
            self._offer(e)
        self._truncate()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.ordered())

    def __eq__(self, other) -> bool:
        return isinstance(other, WorstQueue) and self.ordered() == other.ordered()

    def ordered(self) -> list[QueueEntry]:
        return sorted(self._entries.values(), key=QueueEntry.rank)

    def get(self, chunk: ChunkId) -> QueueEntry | None:
        return self._entries.get(chunk)

    def _offer(self, entry: QueueEntry) -> None:
        cur = self._entries.get(entry.chunk)
        if cur is None or entry.freshness() > cur.freshness():
            self._entries[entry.chunk] = entry

    def _truncate(self) -> None:
        if len(self._entries) > self.capacity:
            keep = self.ordered()[: self.capacity]
            self._entries = {e.chunk: e for e in keep}

    def update(self, entries: Iterable[QueueEntry]) -> None:
        for e in entries:
            self._offer(e)
        self._truncate()

    def discard(self, chunk: ChunkId) -> None:
        self._entries.pop(chunk, None)

    def expire(self, now: float, max_age: float) -> None:
        stale = [c for c, e in self._entries.items() if now - e.stamp > max_age]
        for c in stale:
            del self._entries[c]

    def copy(self) -> "WorstQueue":
        q = WorstQueue(self.capacity)
        q._entries = dict(self._entries)
        return q


def queue_gossip_merge(local: WorstQueue, remote: Iterable[QueueEntry]) -> WorstQueue:
    merged = local.copy()
    merged.update(e for e in remote if isinstance(e, QueueEntry))
    return merged


@dataclass
class TabooList:
    expiry: dict[PeerId, float] = field(default_factory=dict)

    def add(self, owner: PeerId, now: float, ttl: float) -> None:
        self.expiry[owner] = now + ttl

    def is_taboo(self, owner: PeerId, now: float) -> bool:
        until = self.expiry.get(owner)
        if until is None:
            return False
        if now >= until:
            del self.expiry[owner]
            return False
        return True


def optimizer_tick(
    me: PeerId,
    free_space: int,
    queue: WorstQueue,
    taboo: TabooList,
    rng: random.Random,
    now: float,
    cfg: OptimizerConfig,
    held: Iterable[ChunkId] = (),
    eligible: Callable[[PeerId], bool] | None = None,
) -> QueueEntry | None:
    """Pick at most one chunk to offer storage for.

    The coin is always flipped first so the random stream does not depend on
    queue contents.  ``eligible`` lets the runtime skip owners its failure
    detector believes are down.
    """
    if rng.random() >= proposal_probability(cfg):
        return None
    held = set(held)
    for entry in queue.ordered():
        if entry.owner == me or entry.chunk in held:
            continue
        if entry.size > free_space:
            continue
        if taboo.is_taboo(entry.owner, now):
            continue
        if eligible is not None and not eligible(entry.owner):
            continue
        return entry
    return None
