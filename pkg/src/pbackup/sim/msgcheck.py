"""Randomized schedules for the asynchronous messenger.

A small network of messengers exchanges relays over a transport that drops,
duplicates and reorders deliveries while peers flip on and off.  Each run
checks the bookkeeping invariants and returns what it observed.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..messaging import Outcome, SyncMessenger
from ..model import PeerId, derive_peer_id


class ScheduleViolation(AssertionError):
    pass


@dataclass
class ScheduleStats:
    steps: int = 0
    sent: int = 0
    deliveries: int = 0
    duplicates_injected: int = 0
    executions: dict = field(default_factory=dict)  # (src, dst) -> executed seqs in order


def _ids(n: int) -> list[PeerId]:
    return [derive_peer_id(f"msgcheck-{i}".encode()) for i in range(n)]


def run_schedule(seed: int, nodes: int = 5, synchro: int = 3, sends: int = 4, steps: int = 40) -> ScheduleStats:
    rng = random.Random(seed)
    ids = _ids(nodes)
    target = ids[0]
    members = [target] + ids[1:1 + synchro]
    senders = [p for p in ids if p not in members] or ids[-1:]
    msgr = {p: SyncMessenger(p) for p in ids}
    online = {p: rng.random() < 0.5 for p in ids}
    flight: list = []  # (holder, peer, msg)
    last_sent: dict = {}
    stats = ScheduleStats()

    def check_holders():
        for p, m in msgr.items():
            for pair, held in m.state.pending.items():
                if held.pair != pair:
                    raise ScheduleViolation("pending entry filed under the wrong pair")
                if held.seq != m.state.seen_seq.get(pair):
                    raise ScheduleViolation(f"holder keeps seq {held.seq} after seeing {m.state.seen_seq[pair]}")

    def deliver(holder, peer, msg):
        if not online[peer]:
            msgr[holder].on_send_result(peer, msg, False)
            return
        stats.deliveries += 1
        outcome, payload = msgr[peer].on_receive(msg)
        if outcome is Outcome.EXECUTED:
            seqs = stats.executions.setdefault(msg.pair, [])
            if seqs and msg.seq <= seqs[-1]:
                raise ScheduleViolation(f"seq {msg.seq} executed after {seqs[-1]}")
            if payload != {"seq": msg.seq}:
                raise ScheduleViolation("executed payload does not match its message")
            seqs.append(msg.seq)
        msgr[holder].on_send_result(peer, msg, True)

    for _ in range(steps):
        stats.steps += 1
        r = rng.random()
        if r < 0.15:
            p = rng.choice(ids)
            online[p] = not online[p]
        elif r < 0.3 and stats.sent < sends:
            src = rng.choice(senders)
            if online[src]:
                seq = msgr[src].next_seq.get(target, 0) + 1
                msg, attempts = msgr[src].send_async(target, {"seq": seq}, members)
                last_sent[msg.pair] = msg.seq
                stats.sent += 1
                flight.extend((src, p, m) for p, m in attempts)
        elif r < 0.5:
            p = rng.choice(ids)
            if online[p]:
                flight.extend((p, q, m) for q, m in msgr[p].relay_tick())
        elif flight:
            i = rng.randrange(len(flight))
            holder, peer, msg = flight[i]
            if rng.random() < 0.2:
                stats.duplicates_injected += 1  # leave a copy in flight
            else:
                flight.pop(i)
            if rng.random() < 0.1:
                msgr[holder].on_send_result(peer, msg, False)
            else:
                deliver(holder, peer, msg)
        check_holders()

    # drain: everyone online, in-flight copies land in random order, then relay until quiet
    for p in ids:
        online[p] = True
    rng.shuffle(flight)
    for holder, peer, msg in flight:
        deliver(holder, peer, msg)
    for _ in range(nodes + 2):
        attempts = [(p, q, m) for p in ids for q, m in msgr[p].relay_tick()]
        if not attempts:
            break
        for holder, peer, msg in attempts:
            deliver(holder, peer, msg)
    check_holders()
    for p, m in msgr.items():
        if m.pending_count():
            raise ScheduleViolation(f"{p.short} still holds messages after the drain")
    for pair, seq in last_sent.items():
        got = stats.executions.get(pair, [])
        if not got or got[-1] != seq:
            raise ScheduleViolation(f"latest seq {seq} never executed (got {got})")
        if len(set(got)) != len(got):
            raise ScheduleViolation("payload executed twice")
    return stats
