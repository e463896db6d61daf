"""Replicated store of peer descriptors.

Responsibility for a key goes to the ``replication_degree`` members that follow
it clockwise on the id ring.  Holders keep versioned descriptors and reconcile
with anti-entropy; the highest update counter wins.
"""
from __future__ import annotations

import bisect
import enum
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

from .model import PeerDescriptor, PeerId


class RegistryMode(enum.Enum):
    SIMULATED_ORACLE = "simulated_oracle"
    REPLICATED = "replicated"


@dataclass(frozen=True)
class RegistryConfig:
    replication_degree: int = 5
    mode: RegistryMode = RegistryMode.REPLICATED
    max_synchro: int | None = None

    def __post_init__(self):
        if self.replication_degree < 1:
            raise ValueError("replication_degree must be at least 1")


class RegistryUnavailable(Exception):
    """No responsible holder could be reached."""


def responsible_set(key: PeerId, members: Iterable[PeerId], cfg: RegistryConfig) -> list[PeerId]:
    ring = sorted(set(members))
    if not ring:
        raise ValueError("membership view is empty")
    if cfg.replication_degree >= len(ring):
        start = bisect.bisect_right(ring, key)
        return ring[start:] + ring[:start]
    start = bisect.bisect_right(ring, key)
    return [ring[(start + i) % len(ring)] for i in range(cfg.replication_degree)]


@dataclass
class RegistryHolder:
    """Descriptor replica kept by one node."""

    descriptors: dict[PeerId, PeerDescriptor] = field(default_factory=dict)

    def store(self, desc: PeerDescriptor) -> bool:
        cur = self.descriptors.get(desc.peer)
        if cur is not None and cur.counter >= desc.counter:
            return False
        self.descriptors[desc.peer] = desc
        return True

    def get(self, peer: PeerId) -> PeerDescriptor | None:
        return self.descriptors.get(peer)

    def digest(self) -> dict[PeerId, int]:
        return {p: d.counter for p, d in self.descriptors.items()}

    def newer_than(self, digest: dict[PeerId, int]) -> list[PeerDescriptor]:
        return [d for p, d in self.descriptors.items() if d.counter > digest.get(p, -1)]

    def anti_entropy(self, other: "RegistryHolder") -> int:
        """Push-pull exchange; returns the number of descriptors that changed."""
        changed = 0
        for d in other.newer_than(self.digest()):
            changed += self.store(d)
        for d in self.newer_than(other.digest()):
            changed += other.store(d)
        return changed


def put_descriptor(
    desc: PeerDescriptor,
    holders: dict[PeerId, RegistryHolder],
    reachable: Callable[[PeerId], bool],
    cfg: RegistryConfig,
) -> int:
    """Store at every reachable responsible holder; returns the acknowledged count."""
    desc.validate(cfg.max_synchro)
    acked = 0
    for h in responsible_set(desc.peer, holders.keys(), cfg):
        if reachable(h):
            holders[h].store(desc)
            acked += 1
    if acked == 0:
        raise RegistryUnavailable(f"no holder reachable for {desc.peer.short}")
    return acked


def get_descriptor(
    peer: PeerId,
    holders: dict[PeerId, RegistryHolder],
    reachable: Callable[[PeerId], bool],
    cfg: RegistryConfig,
) -> PeerDescriptor | None:
    """Freshest copy among reachable responsible holders."""
    best = None
    reached = 0
    for h in responsible_set(peer, holders.keys(), cfg):
        if not reachable(h):
            continue
        reached += 1
        d = holders[h].get(peer)
        if d is not None and (best is None or d.counter > best.counter):
            best = d
    if reached == 0:
        raise RegistryUnavailable(f"no holder reachable for {peer.short}")
    return best


class OracleRegistry:
    """Single shared map standing in for the registry inside the simulator."""

    def __init__(self, max_synchro: int | None = None):
        self.holder = RegistryHolder()
        self.max_synchro = max_synchro

    def put(self, desc: PeerDescriptor) -> int:
        desc.validate(self.max_synchro)
        self.holder.store(desc)
        return 1

    def get(self, peer: PeerId) -> PeerDescriptor | None:
        return self.holder.get(peer)

    def members(self) -> list[PeerId]:
        return list(self.holder.descriptors)
