"""Placement scoring: backup-duration estimate, sub-utilities and the equality band.

All functions are pure.  Utilities are non-positive; 0 is a perfect placement.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass

from .model import PeerId, PeerProfile, Placement, PolicyConfig

INF = math.inf


class UtilityError(Exception):
    """Raised when a placement cannot be scored (e.g. a replicator lacks a profile)."""


@dataclass(frozen=True)
class UtilityScore:
    value: float
    geo: float
    replica_penalty: float
    perf_penalty: float

    def recombined(self) -> float:
        return self.geo - self.replica_penalty - self.perf_penalty


def estimate_transfer_duration(load_bytes: float, profile: PeerProfile) -> float:
    """Expected seconds to move ``load_bytes`` to a peer that is up ``p_av`` of the time."""
    if profile.bandwidth_B <= 0:
        raise ValueError("bandwidth must be positive")
    if load_bytes == 0:
        return 0.0
    if profile.p_av <= 0:
        return INF
    return load_bytes / (profile.p_av * profile.bandwidth_B)


def _profile(profiles: Mapping[PeerId, PeerProfile], peer: PeerId) -> PeerProfile:
    try:
        return profiles[peer]
    except KeyError:
        raise UtilityError(f"no profile for replicator {peer.hex()[:16]}") from None


def perf_utility(
    placement: Placement,
    profiles: Mapping[PeerId, PeerProfile],
    load: Mapping[PeerId, float],
    policy: PolicyConfig,
) -> float:
    total = 0.0
    for j in placement.replicators:
        duration = estimate_transfer_duration(load.get(j, 0), _profile(profiles, j))
        # restore has no priority over backup, so both use the same congestion
        total += min(policy.Des_Tb - duration, 0.0) + min(policy.Des_Tr - duration, 0.0)
    return total


def far_replica(replicators, dist: Callable[[PeerId], float]) -> PeerId:
    """Most distant replicator; ties go to the smaller peer id."""
    return min(replicators, key=lambda j: (-dist(j), j))


def geo_utility(placement: Placement, dist: Callable[[PeerId], float], policy: PolicyConfig) -> float:
    reps = placement.replicators
    if not reps:
        return 0.0
    j_max = far_replica(reps, dist)
    d_max = dist(j_max)
    value = min(0.0, d_max - policy.remote_min) + min(0.0, policy.remote_max - d_max)
    for j in reps:
        if j != j_max:
            value += min(0.0, policy.close_max - dist(j))
    return value


def placement_utility(
    placement: Placement,
    profiles: Mapping[PeerId, PeerProfile],
    load: Mapping[PeerId, float],
    dist: Callable[[PeerId], float],
    policy: PolicyConfig,
    extra_count: int = 0,
) -> UtilityScore:
    """Score a placement.

    ``extra_count`` adds replicators that count toward the replica-count term
    without being scored otherwise (revoke-pending contracts when the policy
    counts them).
    """
    geo = geo_utility(placement, dist, policy)
    count = len(placement.replicators) + extra_count
    replica_penalty = policy.L * abs(count - policy.N_r)
    perf_penalty = policy.M * -perf_utility(placement, profiles, load, policy)
    return UtilityScore(geo - replica_penalty - perf_penalty, geo, replica_penalty, perf_penalty)


def approx_equal(u1: float, u2: float, band: float) -> bool:
    if not 0.0 <= band < 1.0:
        raise ValueError("band must lie in [0, 1)")
    if u1 == u2:
        return True
    if math.isinf(u1) or math.isinf(u2):
        return False
    return abs(u1 - u2) <= band * max(abs(u1), abs(u2))


def strictly_better(new: float, old: float, band: float) -> bool:
    """True when ``new`` beats ``old`` by more than the equality band."""
    return new > old and not approx_equal(new, old, band)
