import pytest
from hypothesis import given, settings, strategies as st

from pbackup.messaging import AsyncMessage, Outcome, SynchroState, SyncMessenger
from pbackup.sim.msgcheck import run_schedule

from conftest import pid

SRC, DST = pid(0), pid(1)
SYNCHRO = [DST, pid(2), pid(3), pid(4), pid(5)]


def test_dispatch_to_online_subset():
    m = SyncMessenger(SRC)
    msg, attempts = m.send_async(DST, {"x": 1}, SYNCHRO)
    assert [p for p, _ in attempts] == SYNCHRO
    for p in (pid(2), pid(3)):
        m.on_send_result(p, msg, True)
    for p in (DST, pid(4), pid(5)):
        m.on_send_result(p, msg, False)
    assert m.state.pending[msg.pair].pending_set == (DST, pid(4), pid(5))


def test_target_must_be_in_set():
    with pytest.raises(ValueError):
        SyncMessenger(SRC).send_async(DST, {}, [pid(2)])


def test_online_target_executes_immediately():
    msg, attempts = SyncMessenger(SRC).send_async(DST, {"x": 1}, [DST])
    outcome, payload = SyncMessenger(DST).on_receive(attempts[0][1])
    assert outcome is Outcome.EXECUTED and payload == {"x": 1}


def test_newer_seq_supersedes_held():
    holder = SyncMessenger(pid(2))
    old = AsyncMessage(SRC, DST, 3, "a", (DST,))
    new = AsyncMessage(SRC, DST, 5, "b", (DST,))
    assert holder.on_receive(old)[0] is Outcome.STORED
    assert holder.on_receive(new)[0] is Outcome.SUPERSEDED
    assert holder.state.pending[(SRC, DST)].seq == 5
    assert holder.on_receive(AsyncMessage(SRC, DST, 2, "c", (DST,)))[0] is Outcome.STALE_DROPPED
    assert holder.pending_count() == 1


def test_relay_tick_trims_reached_peers():
    holder = SyncMessenger(pid(2))
    holder.on_receive(AsyncMessage(SRC, DST, 1, "a", (DST, pid(3))))
    attempts = holder.relay_tick()
    assert {p for p, _ in attempts} == {DST, pid(3)}
    holder.on_send_result(pid(3), attempts[0][1], True)
    assert holder.state.pending[(SRC, DST)].pending_set == (DST,)


def test_duplicate_merge_keeps_intersection():
    holder = SyncMessenger(pid(2))
    holder.on_receive(AsyncMessage(SRC, DST, 1, "a", (DST, pid(3), pid(4))))
    assert holder.on_receive(AsyncMessage(SRC, DST, 1, "a", (DST, pid(4))))[0] is Outcome.DUPLICATE
    assert holder.state.pending[(SRC, DST)].pending_set == (DST, pid(4))


def test_target_never_reexecutes():
    t = SyncMessenger(DST)
    t.state.delivered_seq[SRC] = 7
    assert t.on_receive(AsyncMessage(SRC, DST, 7, "a", ()))[0] is Outcome.DUPLICATE
    assert t.on_receive(AsyncMessage(SRC, DST, 8, "b", ()))[0] is Outcome.EXECUTED


def test_held_until_target_online():
    m = SyncMessenger(SRC)
    msg, _ = m.send_async(DST, "p", [DST, pid(2)])
    m.on_send_result(pid(2), msg, True)
    relay = SyncMessenger(pid(2))
    relay.on_receive(msg)
    # target offline: every attempt fails, the message stays put
    for _ in range(3):
        for p, mm in relay.relay_tick():
            relay.on_send_result(p, mm, False)
    assert relay.pending_count() == 1
    (p, mm), = relay.relay_tick()
    assert SyncMessenger(DST).on_receive(mm)[0] is Outcome.EXECUTED
    relay.on_send_result(p, mm, True)
    assert relay.pending_count() == 0


def test_state_roundtrip():
    m = SyncMessenger(pid(2))
    m.on_receive(AsyncMessage(SRC, DST, 4, {"v": [1, 2]}, (DST,)))
    m.state.delivered_seq[pid(9)] = 3
    assert SynchroState.from_dict(m.state.to_dict()) == m.state


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_random_schedules_keep_bookkeeping(seed):
    run_schedule(seed)


@pytest.mark.parametrize("nodes,synchro", [(3, 1), (4, 2), (7, 5)])
def test_schedule_shapes(nodes, synchro):
    for seed in range(200):
        run_schedule(seed, nodes=nodes, synchro=synchro, sends=6, steps=60)
