import math

import pytest
from hypothesis import given, strategies as st

from pbackup.model import ChunkId, ChunkMeta, PeerProfile, Placement, PolicyConfig
from pbackup.utility import (UtilityError, approx_equal, estimate_transfer_duration, geo_utility, perf_utility,
                             placement_utility, strictly_better)

from conftest import pid

MB = 1_000_000
OWNER = pid(0)


def prof(n, p_av=1.0, B=MB):
    return PeerProfile(pid(n), p_av, B)


def placement(*ns):
    return Placement(ChunkMeta(ChunkId(OWNER, 0), 50 * MB), frozenset(pid(n) for n in ns))


@pytest.mark.parametrize("load,p_av,B,expected", [
    (1000 * MB, 0.5, MB, 2000.0),
    (2_250_000_000, 1.0, 500_000, 4500.0),
    (0, 0.3, MB, 0.0),
    (0, 0.0, MB, 0.0),
])
def test_transfer_duration(load, p_av, B, expected):
    assert estimate_transfer_duration(load, PeerProfile(pid(1), p_av, B)) == pytest.approx(expected)


def test_never_available_peer_is_infinitely_slow():
    assert estimate_transfer_duration(1, PeerProfile(pid(1), 0.0, MB)) == math.inf


def test_perf_utility_cases():
    policy = PolicyConfig(Des_Tb=4500, Des_Tr=86_400)
    profiles = {pid(1): prof(1, B=500_000)}
    # 4945 s of transfer: 445 s over the backup window, within the restore one
    load = {pid(1): 4945 * 500_000}
    assert perf_utility(placement(1), profiles, load, policy) == pytest.approx(-445)
    assert perf_utility(placement(1), profiles, {pid(1): 100}, policy) == 0.0

    policy = PolicyConfig(Des_Tb=100, Des_Tr=100)
    profiles = {pid(n): prof(n) for n in (1, 2)}
    load = {pid(n): 200 * MB for n in (1, 2)}
    assert perf_utility(placement(1, 2), profiles, load, policy) == pytest.approx(-400)


def test_missing_profile_names_peer():
    with pytest.raises(UtilityError, match=pid(1).hex()[:16]):
        perf_utility(placement(1), {}, {}, PolicyConfig())


def _geo_terms(dists, close_max, lo, hi):
    """Term-by-term oracle: far replica first, the rest are near replicas."""
    ds = sorted(dists, reverse=True)
    far, near = ds[0], ds[1:]
    total = min(0, far - lo) + min(0, hi - far)
    for d in near:
        total += min(0, close_max - d)
    return total


@pytest.mark.parametrize("dists,expected", [
    ((0, 0, 5), 0),
    ((0, 0, 2), -1),
    ((1, 1, 9), -3),
])
def test_geo_utility(dists, expected):
    policy = PolicyConfig(close_max=0, remote_min=3, remote_max=8)
    d = {pid(i + 1): v for i, v in enumerate(dists)}
    assert geo_utility(placement(1, 2, 3), d.__getitem__, policy) == expected
    assert _geo_terms(dists, 0, 3, 8) == expected


@given(st.lists(st.integers(0, 12), min_size=1, max_size=6), st.integers(0, 3), st.integers(0, 6), st.integers(0, 6))
def test_geo_matches_term_oracle(dists, close_max, lo, width):
    policy = PolicyConfig(close_max=close_max, remote_min=lo, remote_max=lo + width)
    d = {pid(i + 1): v for i, v in enumerate(dists)}
    p = placement(*range(1, len(dists) + 1))
    assert geo_utility(p, d.__getitem__, policy) == _geo_terms(dists, close_max, lo, lo + width)


def test_geo_empty_is_zero():
    assert geo_utility(placement(), lambda j: 99, PolicyConfig(remote_min=3, remote_max=8)) == 0.0


def test_placement_utility_perfect_and_count_penalty():
    policy = PolicyConfig(N_r=3, close_max=0, remote_min=3, remote_max=8)
    d = {pid(1): 0, pid(2): 0, pid(3): 5}
    profiles = {pid(n): prof(n) for n in (1, 2, 3)}
    assert placement_utility(placement(1, 2, 3), profiles, {}, d.__getitem__, policy).value == 0
    d = {pid(1): 0, pid(2): 5}
    score = placement_utility(placement(1, 2), profiles, {}, d.__getitem__, policy)
    assert score.value == -1e6
    assert score.recombined() == score.value


def test_weight_sets_dominant_term():
    # 100 s over the backup window and 1 TTL unit short of the remote window
    profiles = {pid(1): prof(1)}
    load = {pid(1): 1100 * MB}
    dist = {pid(1): 2}.__getitem__
    scores = {}
    for M in (0.01, 1.0):
        policy = PolicyConfig(N_r=1, Des_Tb=1000, Des_Tr=86_400, close_max=0, remote_min=3, remote_max=8, M=M)
        scores[M] = placement_utility(placement(1), profiles, load, dist, policy)
    assert scores[0.01].value == pytest.approx(-1 - 1)
    assert scores[1.0].value == pytest.approx(-1 - 100)
    assert scores[1.0].perf_penalty == 100 * -scores[1.0].geo


@pytest.mark.parametrize("a,b,band,expected", [
    (-100, -109, 0.10, True),
    (-100, -112, 0.10, False),
    (0, 0, 0.10, True),
    (-100, -110, 0.10, True),
    (0, -1, 0.10, False),
    (-math.inf, -math.inf, 0.10, True),
    (-math.inf, -1e9, 0.10, False),
])
def test_approx_equal(a, b, band, expected):
    assert approx_equal(a, b, band) is expected
    assert approx_equal(b, a, band) is expected


def test_band_range():
    with pytest.raises(ValueError):
        approx_equal(1, 1, 1.0)


finite = st.floats(-1e9, 0, allow_nan=False)


@given(finite, finite)
def test_strictly_better_is_asymmetric(a, b):
    assert not (strictly_better(a, b, 0.1) and strictly_better(b, a, 0.1))
    if strictly_better(a, b, 0.1):
        assert a > b and not approx_equal(a, b, 0.1)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), st.floats(0, 1e10))
def test_utility_never_positive(pavs, load):
    profiles = {pid(i + 1): PeerProfile(pid(i + 1), p, MB) for i, p in enumerate(pavs)}
    loads = {p: load for p in profiles}
    policy = PolicyConfig(Des_Tb=3600, Des_Tr=3600, remote_min=1, remote_max=4)
    u = placement_utility(placement(*range(1, len(pavs) + 1)), profiles, loads, lambda j: 2, policy)
    assert u.value <= 0
