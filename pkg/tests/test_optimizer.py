import random

import pytest
from hypothesis import given, settings, strategies as st

from pbackup.model import ChunkId
from pbackup.optimizer import (OptimizerConfig, QueueEntry, TabooList, WorstQueue, optimizer_tick,
                               proposal_probability, queue_gossip_merge)
from pbackup.sim.checks import measure_proposal_rate

from conftest import pid


@pytest.mark.parametrize("T,N,alpha,expected", [
    (600, 150, 0.1, 0.4),
    (600, 10, 0.1, 1.0),
    (600, 1, 0.001, 0.6),
])
def test_proposal_probability(T, N, alpha, expected):
    cfg = OptimizerConfig(alpha=alpha, period_T=T, N_est=N)
    assert proposal_probability(cfg) == pytest.approx(expected)


def test_expected_rate_equals_alpha():
    cfg = OptimizerConfig(alpha=0.1, period_T=600, N_est=150)
    assert proposal_probability(cfg) * 150 / 600 == pytest.approx(0.1)


def entry(owner, index, utility, stamp=0.0, size=10):
    return QueueEntry(ChunkId(pid(owner), index), utility, stamp, size)


entries = st.lists(st.builds(entry, st.integers(1, 6), st.integers(0, 4), st.integers(-5, 0).map(float),
                             st.integers(0, 10).map(float)), max_size=30)


@given(entries, entries, st.integers(1, 8))
def test_merge_keeps_the_worst(a, b, cap):
    q = queue_gossip_merge(WorstQueue(cap, a), b)
    assert len(q) <= cap
    chunks = [e.chunk for e in q]
    assert len(chunks) == len(set(chunks))
    ranks = [e.rank() for e in q.ordered()]
    assert ranks == sorted(ranks)


@given(entries, entries)
def test_merge_order_independent(a, b):
    q1 = queue_gossip_merge(WorstQueue(64, a), b)
    q2 = queue_gossip_merge(WorstQueue(64, b), a)
    assert q1 == q2


def test_fresher_entry_wins():
    q = WorstQueue(4, [entry(1, 0, -10, stamp=1)])
    q.update([entry(1, 0, -2, stamp=5)])
    assert q.get(ChunkId(pid(1), 0)).utility == -2
    q.update([entry(1, 0, -50, stamp=3)])
    assert q.get(ChunkId(pid(1), 0)).utility == -2


def test_expire_drops_old_entries():
    q = WorstQueue(4, [entry(1, 0, -1, stamp=0), entry(2, 0, -1, stamp=100)])
    q.expire(150, 100)
    assert [e.owner for e in q] == [pid(2)]


def always(cfg=None):
    return cfg or OptimizerConfig(alpha=1.0, period_T=10, N_est=1)


def test_taboo_head_skipped():
    q = WorstQueue(4, [entry(1, 0, -9), entry(2, 0, -5)])
    taboo = TabooList()
    taboo.add(pid(1), 0, 60)
    got = optimizer_tick(pid(0), 10**6, q, taboo, random.Random(0), 30, always())
    assert got.owner == pid(2)
    got = optimizer_tick(pid(0), 10**6, q, taboo, random.Random(0), 61, always())
    assert got.owner == pid(1)


def test_tick_filters():
    q = WorstQueue(8, [entry(0, 0, -9), entry(1, 0, -8), entry(2, 0, -7, size=10**9), entry(3, 0, -6), entry(4, 0, -5)])
    got = optimizer_tick(pid(0), 1000, q, TabooList(), random.Random(0), 0, always(),
                         held=[ChunkId(pid(1), 0)], eligible=lambda o: o != pid(3))
    assert got.owner == pid(4)


def test_empty_queue_no_offer():
    assert optimizer_tick(pid(0), 10**6, WorstQueue(2), TabooList(), random.Random(0), 0, always()) is None


def test_coin_consumed_regardless_of_queue():
    a, b = random.Random(5), random.Random(5)
    optimizer_tick(pid(0), 0, WorstQueue(2), TabooList(), a, 0, always())
    optimizer_tick(pid(0), 10**6, WorstQueue(2, [entry(1, 0, -1)]), TabooList(), b, 0, always())
    assert a.random() == b.random()


def test_wire_roundtrip():
    e = QueueEntry(ChunkId(pid(3), 7), -12.5, 99.0, 50, 2)
    assert QueueEntry.from_wire(e.to_wire()) == e


@pytest.mark.parametrize("alpha,T,N", [(0.1, 600, 150), (0.01, 600, 48), (0.02, 300, 16)])
def test_measured_rate_near_alpha(alpha, T, N):
    assert measure_proposal_rate(alpha, T, N, periods=200, seed=3) == pytest.approx(alpha, rel=0.2)
