import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from pbackup.catalog import DataCatalog, ReplicaIndex
from pbackup.contracts import (ContractEngine, DecisionKind, EngineConfig, EvalContext, Offer, PolicyViolation,
                               RepairDigest, RevokeMode, rebuild_catalog)
from pbackup.model import ChunkId, Contract, ContractState, PeerProfile, PolicyConfig
from pbackup.protocol import CancelPull, DropData, MsgType, Note, Send, SendAsync, StartPull

from conftest import pid

MB = 1_000_000
OWNER = pid(0)
H = 3600.0


def engine(policy=None, cfg=None, me=OWNER):
    return ContractEngine(me, policy or PolicyConfig(N_r=3, Des_Tb=1e9, Des_Tr=1e9), DataCatalog(), ReplicaIndex(),
                          cfg or EngineConfig())


def prof(n, p_av=0.5, B=MB, load=0):
    return PeerProfile(pid(n), p_av, B, 10**12, load)


def ctx(profiles, dist=lambda p: 0, **kw):
    return EvalContext({p.peer: p for p in profiles}, dist, **kw)


def with_contracts(eng, reps, state=ContractState.COMMITTED, size=50 * MB, data=True):
    entry = eng.add_chunk(size)
    for n in reps:
        entry.contracts[pid(n)] = Contract(entry.meta.chunk, pid(n), state, data_present=data, acked_version=0)
    return entry


def sends(effects, mtype=None):
    return [e for e in effects if isinstance(e, Send) and (mtype is None or e.mtype is mtype)]


def test_under_replicated_adds():
    eng = engine()
    entry = with_contracts(eng, [1, 2])
    decision, effects = eng.handle_offer(Offer(pid(3), entry.meta.chunk, 0, prof(3)), ctx([prof(1), prof(2)]), 0)
    assert decision.kind is DecisionKind.ADD
    assert entry.contracts[pid(3)].state is ContractState.TENTATIVE
    assert sends(effects, MsgType.OFFER_DECISION)[0].body["accepted"]


@pytest.mark.parametrize("version,reason", [(-1, "stale offer")])
def test_reject_reasons(version, reason):
    eng = engine()
    entry = with_contracts(eng, [1])
    eng.bump_version(entry.meta.chunk)
    d = eng.evaluate_offer(Offer(pid(3), entry.meta.chunk, 0, prof(3)), ctx([prof(1)]))
    assert d.kind is DecisionKind.REJECT and d.reason == reason
    d = eng.evaluate_offer(Offer(pid(3), ChunkId(OWNER, 99), 1, prof(3)), ctx([prof(1)]))
    assert d.reason == "unknown chunk"
    d = eng.evaluate_offer(Offer(pid(1), entry.meta.chunk, 1, prof(1)), ctx([prof(1)]))
    assert d.reason == "already a replicator"


def slow_policy():
    return PolicyConfig(N_r=2, Des_Tb=3600, Des_Tr=3600)


def test_swap_replaces_least_available():
    eng = engine(slow_policy())
    entry = with_contracts(eng, [1, 2])
    # 10 GB contracted at each: p_av .1 -> 100000 s, p_av .9 -> ~11111 s
    c = ctx([prof(1, 0.1, load=10**10), prof(2, 0.9, load=10**10)])
    d = eng.evaluate_offer(Offer(pid(3), entry.meta.chunk, 0, prof(3, 0.9, load=10**10)), c)
    assert d.kind is DecisionKind.SWAP and d.victim == pid(1)
    assert d.proposed > d.current


def test_improvement_inside_band_rejected():
    eng = engine(slow_policy())
    entry = with_contracts(eng, [1, 2])
    c = ctx([prof(1, 0.50, load=10**10), prof(2, 0.50, load=10**10)])
    d = eng.evaluate_offer(Offer(pid(3), entry.meta.chunk, 0, prof(3, 0.52, load=10**10)), c)
    assert d.kind is DecisionKind.REJECT and d.reason == "no improvement"


# ----- brute-force oracle for owner decisions -----

def oracle_utility(reps, profiles, load, dist, pol):
    """Direct formula evaluation, written without the utility module."""
    if reps:
        far = min(reps, key=lambda j: (-dist[j], j))
        geo = min(0, dist[far] - pol.remote_min) + min(0, pol.remote_max - dist[far])
        geo += sum(min(0, pol.close_max - dist[j]) for j in reps if j != far)
    else:
        geo = 0
    perf = 0.0
    for j in reps:
        p = profiles[j]
        e = 0.0 if load[j] == 0 else (math.inf if p.p_av == 0 else load[j] / (p.p_av * p.bandwidth_B))
        perf += min(pol.Des_Tb - e, 0) + min(pol.Des_Tr - e, 0)
    return geo - pol.L * abs(len(reps) - pol.N_r) + pol.M * perf


def oracle_decision(reps, i, size, profiles, dist, pol):
    load = {p: profiles[p].load for p in profiles}
    current = oracle_utility(reps, profiles, load, dist, pol)
    load_i = dict(load)
    load_i[i] = profiles[i].load + size
    cands = {}
    for j in sorted(reps):
        cands[j] = oracle_utility([r for r in reps if r != j] + [i], profiles, load_i, dist, pol)
    best = max(cands.values())
    winners = [j for j in sorted(cands) if cands[j] == best]
    band = pol.equality_band
    improves = best > current and not (best == current or abs(best - current) <= band * max(abs(best), abs(current)))
    return (winners[0] if improves else None), best, current


instance = st.fixed_dictionaries({
    "k": st.integers(1, 5),
    "pav": st.lists(st.sampled_from([0.05, 0.1, 0.3, 0.5, 0.9, 1.0]), min_size=6, max_size=6),
    "load": st.lists(st.integers(0, 40) .map(lambda g: g * 250 * MB), min_size=6, max_size=6),
    "dist": st.lists(st.integers(0, 10), min_size=6, max_size=6),
    "M": st.sampled_from([0.01, 1.0]),
    "window": st.sampled_from([1800.0, 4500.0, 86400.0]),
})


@settings(max_examples=400, deadline=None)
@given(instance)
def test_owner_decision_matches_brute_force(inst):
    k = inst["k"]
    pol = PolicyConfig(N_r=k, Des_Tb=inst["window"], Des_Tr=inst["window"], close_max=1, remote_min=3,
                       remote_max=8, M=inst["M"])
    eng = engine(pol)
    entry = with_contracts(eng, range(1, k + 1))
    profiles = {pid(n): PeerProfile(pid(n), inst["pav"][n - 1], MB, 0, inst["load"][n - 1]) for n in range(1, 7)}
    dist = {pid(n): inst["dist"][n - 1] for n in range(1, 7)}
    i = pid(6)
    c = EvalContext({p: v for p, v in profiles.items() if p != i}, dist.__getitem__)
    d = eng.evaluate_offer(Offer(i, entry.meta.chunk, 0, profiles[i]), c)
    want, best, current = oracle_decision([pid(n) for n in range(1, k + 1)], i, entry.meta.size, profiles, dist, pol)
    if want is None:
        assert d.kind is DecisionKind.REJECT
    else:
        assert d.kind is DecisionKind.SWAP
        # ties between equally good victims may resolve to any of them, but the score must match
        assert d.proposed == pytest.approx(best, rel=1e-9, abs=1e-9)
    assert d.current == pytest.approx(current, rel=1e-9, abs=1e-9)


# ----- revocation -----

def decile_ctx(profiles, low):
    return ctx(profiles, first_decile=lambda p: p in low, reachable=lambda p: False)


def test_online_swap_three_party_sequence():
    eng = engine(slow_policy())
    entry = with_contracts(eng, [1, 2])
    chunk = entry.meta.chunk
    c = ctx([prof(1, 0.1, load=10**10), prof(2, 0.9, load=10**10)])
    d, effects = eng.handle_offer(Offer(pid(3), chunk, 0, prof(3, 0.9, load=10**10)), c, 0)
    revoke = sends(effects, MsgType.REVOKE)
    assert d.kind is DecisionKind.SWAP and revoke[0].dst == pid(1) and revoke[0].track
    assert pid(3) not in entry.contracts  # nothing changes before the victim answers
    effects = eng.on_revoke_ack(pid(1), {"chunk": str(chunk), "had_data": True}, c, 1)
    assert entry.contracts[pid(1)].state is ContractState.REVOKE_PENDING
    assert entry.contracts[pid(3)].state is ContractState.TENTATIVE
    assert sends(effects, MsgType.OFFER_DECISION)[0].body["accepted"]
    # old copy outlives the newcomer's download
    eng.commit_due_contracts(2, c)
    assert pid(1) in entry.contracts
    effects = eng.on_transfer_ack(pid(3), {"chunk": str(chunk), "version": 0})
    assert [s.dst for s in sends(effects, MsgType.DELETE_ORDER)] == [pid(1)]
    assert set(entry.contracts) == {pid(2), pid(3)}


def test_async_revoke_only_for_first_decile():
    eng = engine(slow_policy())
    entry = with_contracts(eng, [1, 2])
    c = decile_ctx([prof(1, 0.01), prof(2, 0.5)], {pid(1)})
    effects = eng.revoke_contract(entry.meta.chunk, pid(1), RevokeMode.ASYNC, c, 0)
    assert isinstance(effects[0], SendAsync)
    assert entry.contracts[pid(1)].state is ContractState.REVOKE_PENDING
    with pytest.raises(PolicyViolation):
        eng.revoke_contract(entry.meta.chunk, pid(2), RevokeMode.ASYNC, c, 0)


def test_offline_median_victim_defers_swap():
    eng = engine(slow_policy())
    entry = with_contracts(eng, [1, 2])
    chunk = entry.meta.chunk
    c = decile_ctx([prof(1, 0.1, load=10**10), prof(2, 0.9, load=10**10)], set())
    d, effects = eng.handle_offer(Offer(pid(3), chunk, 0, prof(3, 0.9, load=10**10)), c, 0)
    assert d.kind is DecisionKind.SWAP
    assert any(isinstance(e, Note) and e.kind == "swap_deferred" for e in effects)
    assert set(entry.contracts) == {pid(1), pid(2)}
    assert all(ct.state is ContractState.COMMITTED for ct in entry.contracts.values())


def test_offline_first_decile_victim_swapped_async():
    eng = engine(slow_policy())
    entry = with_contracts(eng, [1, 2])
    c = decile_ctx([prof(1, 0.1, load=10**10), prof(2, 0.9, load=10**10)], {pid(1)})
    eng.handle_offer(Offer(pid(3), entry.meta.chunk, 0, prof(3, 0.9, load=10**10)), c, 0)
    assert entry.contracts[pid(1)].state is ContractState.REVOKE_PENDING
    assert entry.contracts[pid(3)].state is ContractState.TENTATIVE


# ----- commits -----

def test_commit_period_gates_migrations():
    eng = engine(slow_policy(), EngineConfig(commit_period=24 * H))
    entry = with_contracts(eng, [1, 2])
    entry.last_commit_at = 0.0
    chunk = entry.meta.chunk
    c = ctx([prof(1, 0.1, load=10**10), prof(2, 0.9, load=10**10)])
    eng.handle_offer(Offer(pid(3), chunk, 0, prof(3, 0.9, load=10**10)), c, 10 * H)
    eng.on_revoke_ack(pid(1), {"chunk": str(chunk), "had_data": True}, c, 10 * H)
    assert not sends(eng.commit_due_contracts(10 * H, c), MsgType.COMMIT_NOTICE)
    effects = eng.commit_due_contracts(25 * H, c)
    assert [s.dst for s in sends(effects, MsgType.COMMIT_NOTICE)] == [pid(3)]
    assert eng.migrations == [(chunk, 25 * H)]


def test_churn_within_period_yields_one_migration():
    eng = engine(slow_policy(), EngineConfig(commit_period=24 * H))
    entry = with_contracts(eng, [1, 2])
    entry.last_commit_at = 0.0
    chunk = entry.meta.chunk
    pav = {1: 0.1, 2: 0.9}
    t = 24 * H
    swaps = 0
    # five swaps, each newcomer better than the last, while the commit gate is closed and then open
    for step, n in enumerate(range(3, 8)):
        pav[n] = min(1.0, 0.2 + 0.15 * step)
        profiles = [prof(m, pav[m], load=10**10) for m in pav]
        c = ctx(profiles)
        d, _ = eng.handle_offer(Offer(pid(n), chunk, 0, prof(n, pav[n], load=10**10)), c, t + step * H)
        if d.kind is DecisionKind.SWAP:
            swaps += 1
            eng.on_revoke_ack(d.victim, {"chunk": str(chunk), "had_data": True}, c, t + step * H)
        eng.commit_due_contracts(t + step * H + 1, c)
    assert swaps >= 3
    assert len(eng.migrations) == 1


def test_eager_fill_commits_adds_inside_period():
    eng = engine()
    entry = with_contracts(eng, [1])
    entry.last_commit_at = 0.0
    c = ctx([prof(1)])
    eng.handle_offer(Offer(pid(2), entry.meta.chunk, 0, prof(2)), c, H)
    effects = eng.commit_due_contracts(H, c)
    assert [s.dst for s in sends(effects, MsgType.COMMIT_NOTICE)] == [pid(2)]
    assert eng.migrations == []


def test_unreachable_tentative_not_committed():
    eng = engine()
    entry = with_contracts(eng, [])
    c = ctx([prof(1)], reachable=lambda p: False)
    eng.handle_offer(Offer(pid(1), entry.meta.chunk, 0, prof(1)), c, 0)
    assert not sends(eng.commit_due_contracts(0, c))
    assert entry.contracts[pid(1)].state is ContractState.TENTATIVE


# ----- replicator side -----

def replicator(n=5):
    return engine(me=pid(n))


def commit_body(chunk, version, size=50 * MB, sources=(OWNER,)):
    return {"chunk": str(chunk), "version": version, "size": size, "sources": [s.hex() for s in sources]}


def test_fresh_add_downloads_then_acks():
    rep = replicator()
    chunk = ChunkId(OWNER, 0)
    rep.on_offer_decision(OWNER, {"chunk": str(chunk), "accepted": True, "size": 50 * MB})
    effects = rep.on_commit_notice(OWNER, commit_body(chunk, 0, sources=(OWNER, pid(2))))
    pull, = [e for e in effects if isinstance(e, StartPull)]
    assert pull.sources == (OWNER, pid(2))
    effects = rep.on_pull_complete(chunk, 0)
    assert sends(effects, MsgType.TRANSFER_ACK)[0].body == {"chunk": str(chunk), "version": 0}
    assert not sends(effects, MsgType.DELETE_ORDER)


@pytest.mark.parametrize("local,notice,pull", [(3, 5, True), (5, 5, False), (5, 4, False)])
def test_version_notice(local, notice, pull):
    rep = replicator()
    chunk = ChunkId(OWNER, 0)
    rep.on_commit_notice(OWNER, commit_body(chunk, local))
    rep.on_pull_complete(chunk, local)
    effects = rep.handle_version_notice(chunk, notice, 50 * MB, (OWNER,))
    assert any(isinstance(e, StartPull) for e in effects) is pull


def test_version_notice_unknown_chunk_ignored():
    effects = replicator().handle_version_notice(ChunkId(OWNER, 3), 2)
    assert [e.kind for e in effects] == ["notice_ignored"]


def test_delete_order_only_from_owner():
    rep = replicator()
    chunk = ChunkId(OWNER, 0)
    rep.on_commit_notice(OWNER, commit_body(chunk, 0))
    assert rep.on_delete_order(pid(9), chunk)[0].kind == "unauthorized_delete"
    assert chunk in rep.replicas
    effects = rep.on_delete_order(OWNER, chunk)
    assert any(isinstance(e, DropData) for e in effects) and chunk not in rep.replicas


def test_lost_ack_resent_by_repair_exactly_once():
    owner, rep = engine(), replicator()
    entry = with_contracts(owner, [5], data=False)
    chunk = entry.meta.chunk
    entry.contracts[pid(5)].acked_version = -1
    rep.on_commit_notice(OWNER, commit_body(chunk, 0))
    rep.on_pull_complete(chunk, 0)  # the ack is lost in transit
    for _ in range(3):
        answer = sends(owner.on_replica_digest(rep.replicator_digest(OWNER)), MsgType.REPAIR_DIGEST)[0]
        digest, bad = RepairDigest.from_wire(OWNER, answer.body)
        corrections, _ = rep.repair_exchange(digest, bad)
    c = entry.contracts[pid(5)]
    assert c.data_present and c.acked_version == 0
    assert corrections == []


def test_repair_resolves_both_inconsistency_classes():
    owner, rep = engine(), replicator()
    owned = with_contracts(owner, [5])
    stray = ChunkId(OWNER, 7)
    rep.on_commit_notice(OWNER, commit_body(stray, 0))
    corrections, effects = rep.repair_exchange(owner.owner_digest(pid(5)))
    assert ("accept", owned.meta.chunk) in corrections
    assert ("drop", stray) in corrections
    assert owned.meta.chunk in rep.replicas and stray not in rep.replicas
    rep.on_pull_complete(owned.meta.chunk, 0)
    corrections, _ = rep.repair_exchange(owner.owner_digest(pid(5)))
    assert corrections == []


def test_malformed_digest_entries_counted():
    digest, bad = RepairDigest.from_wire(OWNER, {"entries": [["nonsense"], [str(ChunkId(OWNER, 0)), "zz", "owner", 0, 2, 0, 1]]})
    assert bad == 2 and digest.entries == ()


def test_rebuild_unions_reports():
    chunks = [ChunkId(OWNER, i) for i in range(10)]
    responses = {}
    for n in (1, 2, 3):
        responses[pid(n)] = {"records": [[str(c), 50 * MB, 4 if n == 1 else 5, int(ContractState.COMMITTED)]
                                         for c in chunks]}
    responses[pid(3)]["records"] += responses[pid(3)]["records"][:2]
    cat = rebuild_catalog(OWNER, responses)
    assert len(cat) == 10 and cat.next_index == 10
    for c in chunks:
        assert set(cat.get(c).contracts) == {pid(1), pid(2), pid(3)}
        assert cat.get(c).meta.version == 5


def test_rebuild_with_no_answers_is_empty():
    assert len(rebuild_catalog(OWNER, {})) == 0
