"""Exhaustive exploration of contract negotiation under crashes and message loss.

A world is a handful of :class:`ContractEngine` instances, the messages in
flight between them, the downloads in progress and each node's disk.  From
every reachable world the explorer tries every enabled action: deliver any
in-flight message, lose one, complete a download, crash a node (volatile state
and inbound traffic are lost, persisted catalogs survive) or let the owner's
commit timer fire.  Budgets bound losses, crashes and timer firings so the
space is finite; states are deduplicated by a canonical encoding.

Checked on every path:
* no replicated copy of a chunk disappears while it is the last one;
* migrations of a chunk are at least one commit period apart;
and at every leaf, after reliable repair rounds run to a fixpoint:
* owner and replicators agree on every contract and its state.
"""
from __future__ import annotations

import dataclasses
import pickle
from collections.abc import Callable
from dataclasses import dataclass, field

from ..catalog import DataCatalog, ReplicaIndex
from ..contracts import ContractEngine, EngineConfig, EvalContext, Offer, RepairDigest
from ..model import (CatalogEntry, ChunkId, Contract, ContractState, PeerId, PeerProfile, PolicyConfig, ReplicaRecord,
                     derive_peer_id)
from ..protocol import CancelPull, DropData, MsgType, Note, Send, SendAsync, StartPull

COMMITTED = ContractState.COMMITTED
HOUR = 3600.0


class SafetyViolation(AssertionError):
    pass


@dataclass
class Msg:
    src: PeerId
    dst: PeerId
    mtype: MsgType | str  # "ASYNC" for owner-to-replicator payloads relayed by synchro-peers
    body: dict
    track: bool = False

    def key(self):
        return (self.src, self.dst, str(self.mtype), pickle.dumps(sorted(self.body.items())), self.track)


@dataclass
class World:
    engines: dict[PeerId, ContractEngine]
    owner: PeerId
    profiles: dict[PeerId, PeerProfile]
    decile: frozenset
    unreachable: frozenset
    net: list[Msg] = field(default_factory=list)
    pulls: dict[tuple[PeerId, ChunkId], StartPull] = field(default_factory=dict)
    disks: dict[PeerId, dict[ChunkId, int]] = field(default_factory=dict)
    now: float = 0.0
    migrations: list[tuple[ChunkId, float]] = field(default_factory=list)
    drops: int = 0
    crashes: int = 0
    ticks: int = 0
    ever_replicated: set = field(default_factory=set)

    def ctx(self) -> EvalContext:
        return EvalContext(self.profiles, lambda p: 0.0, lambda p: p in self.decile,
                           lambda p: p not in self.unreachable)

    def clone(self) -> "World":
        engines = {}
        for p, e in self.engines.items():
            cat = DataCatalog()
            cat.next_index = e.catalog.next_index
            cat.entries = {c: CatalogEntry(ent.meta, {r: dataclasses.replace(ct) for r, ct in ent.contracts.items()},
                                           ent.last_commit_at)
                           for c, ent in e.catalog.entries.items()}
            reps = ReplicaIndex()
            reps.records = {c: dataclasses.replace(r) for c, r in e.replicas.records.items()}
            engines[p] = ContractEngine(p, e.policy, cat, reps, e.cfg, dict(e.pending_swaps), e.catalog_lost,
                                        list(e.migrations))
        return dataclasses.replace(
            self, engines=engines, net=list(self.net), pulls=dict(self.pulls),
            disks={p: dict(d) for p, d in self.disks.items()}, migrations=list(self.migrations),
            ever_replicated=set(self.ever_replicated))

    def key(self) -> bytes:
        parts = []
        for p in sorted(self.engines):
            e = self.engines[p]
            cat = sorted((c, ent.meta, ent.last_commit_at, sorted(ent.contracts.items()))
                         for c, ent in e.catalog.entries.items())
            reps = sorted(e.replicas.records.items())
            parts.append((p, repr(cat), repr(reps), repr(sorted(e.pending_swaps.items()))))
        net = sorted(m.key() for m in self.net)
        pulls = sorted((k, v.version) for k, v in self.pulls.items())
        disks = sorted((p, sorted(d.items())) for p, d in self.disks.items())
        mig = sorted(self.migrations)
        return pickle.dumps((parts, net, repr(pulls), repr(disks), self.now, repr(mig), self.drops, self.crashes,
                             self.ticks, sorted(self.ever_replicated)))


@dataclass
class Budget:
    drops: int = 1
    crashes: int = 1
    ticks: int = 2
    tick_step: float = 12 * HOUR


@dataclass
class Report:
    scenario: str
    states: int = 0
    leaves: int = 0
    violations: list[str] = field(default_factory=list)


# ----- effect execution -----

def _run(w: World, peer: PeerId, effects: list) -> None:
    for e in effects:
        if isinstance(e, Send):
            w.net.append(Msg(peer, e.dst, e.mtype, e.body, e.track))
        elif isinstance(e, SendAsync):
            w.net.append(Msg(peer, e.dst, "ASYNC", e.payload))
        elif isinstance(e, StartPull):
            w.pulls[(peer, e.chunk)] = e
        elif isinstance(e, CancelPull):
            w.pulls.pop((peer, e.chunk), None)
        elif isinstance(e, DropData):
            w.disks.setdefault(peer, {}).pop(e.chunk, None)
        elif isinstance(e, Note):
            pass
    _collect_migrations(w)


def _collect_migrations(w: World) -> None:
    eng = w.engines[w.owner]
    if eng.migrations:
        w.migrations.extend(eng.migrations)
        eng.migrations.clear()


def _deliver(w: World, m: Msg) -> None:
    eng = w.engines[m.dst]
    body = m.body
    t = m.mtype
    if t == "ASYNC":
        _run(w, m.dst, eng.on_version_payload(m.src, body))
    elif t is MsgType.OFFER:
        offer = Offer.from_wire(m.src, body)
        _, effects = eng.handle_offer(offer, w.ctx(), w.now)
        _run(w, m.dst, effects)
    elif t is MsgType.OFFER_DECISION:
        _run(w, m.dst, eng.on_offer_decision(m.src, body))
    elif t is MsgType.REVOKE:
        _run(w, m.dst, eng.on_revoke(m.src, ChunkId.parse(body["chunk"])))
    elif t is MsgType.REVOKE_ACK:
        _run(w, m.dst, eng.on_revoke_ack(m.src, body, w.ctx(), w.now))
    elif t is MsgType.COMMIT_NOTICE:
        _run(w, m.dst, eng.on_commit_notice(m.src, body))
    elif t is MsgType.TRANSFER_ACK:
        _run(w, m.dst, eng.on_transfer_ack(m.src, body))
    elif t is MsgType.DELETE_ORDER:
        _run(w, m.dst, eng.on_delete_order(m.src, ChunkId.parse(body["chunk"])))
    elif t is MsgType.REPAIR_DIGEST:
        digest, bad = RepairDigest.from_wire(m.src, body)
        if body.get("role") == "owner":
            _, effects = eng.repair_exchange(digest, bad)
            _run(w, m.dst, effects)
        else:
            _run(w, m.dst, eng.on_replica_digest(digest))
    else:
        raise ValueError(f"model has no handler for {t}")


def _fail(w: World, m: Msg) -> None:
    """Sender learns that a tracked message did not arrive."""
    if not m.track:
        return
    eng = w.engines[m.src]
    if m.mtype is MsgType.REVOKE:
        _run(w, m.src, eng.on_revoke_failed(m.dst, m.body, w.ctx(), w.now))
    elif m.mtype is MsgType.COMMIT_NOTICE:
        eng.on_commit_failed(m.dst, m.body)


def _holds(w: World, peer: PeerId, chunk: ChunkId, version: int) -> bool:
    if peer == chunk.owner:
        entry = w.engines[peer].catalog.get(chunk)
        return entry is not None and entry.meta.version >= version
    return w.disks.get(peer, {}).get(chunk, -1) >= version


def _pull_enabled(w: World, key) -> bool:
    node, chunk = key
    pull = w.pulls[key]
    return any(s != node and _holds(w, s, chunk, pull.version) for s in pull.sources)


def _complete_pull(w: World, key, crash_before_handler: bool = False) -> None:
    node, chunk = key
    pull = w.pulls.pop(key)
    w.disks.setdefault(node, {})[chunk] = pull.version
    if crash_before_handler:
        _crash(w, node)
        return
    _run(w, node, w.engines[node].on_pull_complete(chunk, pull.version, pull.owned))


def _crash(w: World, node: PeerId) -> None:
    w.engines[node].recover_after_restart()
    for key in [k for k in w.pulls if k[0] == node]:
        del w.pulls[key]
    lost = [m for m in w.net if m.dst == node]
    w.net = [m for m in w.net if m.dst != node]
    for m in lost:
        _fail(w, m)


def _tick(w: World, step: float) -> None:
    w.now += step
    eng = w.engines[w.owner]
    _run(w, w.owner, eng.commit_due_contracts(w.now, w.ctx()))


# ----- invariants -----

def _replica_copies(w: World, chunk: ChunkId) -> int:
    return sum(1 for p, d in w.disks.items() if p != chunk.owner and chunk in d)


def _check_path(w: World) -> list[str]:
    bad = []
    for chunk in w.engines[w.owner].catalog.entries:
        n = _replica_copies(w, chunk)
        if n > 0:
            w.ever_replicated.add(chunk)
        elif chunk in w.ever_replicated:
            bad.append(f"{chunk}: last replicated copy deleted")
    period = w.engines[w.owner].cfg.commit_period
    times: dict[ChunkId, list[float]] = {}
    for chunk, t in w.migrations:
        times.setdefault(chunk, []).append(t)
    for chunk, ts in times.items():
        ts.sort()
        if any(b - a < period for a, b in zip(ts, ts[1:])):
            bad.append(f"{chunk}: two migrations within one commit period {ts}")
    return bad


def _settle(w: World, rounds: int = 12) -> World:
    """Reliable network: deliver everything, finish downloads, run repair and commits until quiet."""
    w = w.clone()
    w.unreachable = frozenset()
    for _ in range(rounds):
        before = w.key()
        for _ in range(200):
            if w.net:
                _deliver(w, w.net.pop(0))
            elif any(_pull_enabled(w, k) for k in w.pulls):
                _complete_pull(w, next(k for k in sorted(w.pulls) if _pull_enabled(w, k)))
            else:
                break
        for p in sorted(w.engines):
            eng = w.engines[p]
            reps, owners = eng.repair_targets()
            for o in owners:
                w.net.append(Msg(p, o, MsgType.REPAIR_DIGEST, {"role": "replica", **eng.replicator_digest(o).to_wire()}))
            for r in reps:
                w.net.append(Msg(p, r, MsgType.REPAIR_DIGEST, {"role": "owner", **eng.owner_digest(r).to_wire()}))
        w.now += w.engines[w.owner].cfg.commit_period
        _run(w, w.owner, w.engines[w.owner].commit_due_contracts(w.now, w.ctx()))
        if w.key() == before:
            break
    return w


def _check_agreement(w: World) -> list[str]:
    bad = []
    owner_side = {}
    for p, eng in w.engines.items():
        for chunk, entry in eng.catalog.entries.items():
            for r, c in entry.contracts.items():
                owner_side[(chunk, r)] = c.state
    replica_side = {}
    for p, eng in w.engines.items():
        for chunk, rec in eng.replicas.records.items():
            replica_side[(chunk, p)] = rec.state
    if owner_side != replica_side:
        only_o = sorted(set(owner_side) - set(replica_side))
        only_r = sorted(set(replica_side) - set(owner_side))
        diff = sorted(k for k in set(owner_side) & set(replica_side) if owner_side[k] != replica_side[k])
        bad.append(f"disagreement: owner-only {only_o} replica-only {only_r} state {diff}")
    for (chunk, r), st in owner_side.items():
        entry = w.engines[chunk.owner].catalog.get(chunk)
        if st is COMMITTED and not _holds(w, r, chunk, 0):
            bad.append(f"{chunk}: committed at {r.short} without data")
        if st is COMMITTED and not entry.contracts[r].data_present:
            bad.append(f"{chunk}: owner never saw the ack from {r.short}")
    return bad


# ----- exploration -----

def _actions(w: World, budget: Budget) -> list[tuple[str, Callable[[World], None]]]:
    acts = []
    for i, m in enumerate(w.net):
        acts.append((f"deliver {i}", lambda w, i=i: _deliver(w, w.net.pop(i))))
        if w.drops < budget.drops and m.mtype != "ASYNC":
            def drop(w, i=i):
                w.drops += 1
                _fail(w, w.net.pop(i))
            acts.append((f"drop {i}", drop))
    for k in sorted(w.pulls):
        if _pull_enabled(w, k):
            acts.append((f"pull {k}", lambda w, k=k: _complete_pull(w, k)))
            if w.crashes < budget.crashes:
                def pull_crash(w, k=k):
                    w.crashes += 1
                    _complete_pull(w, k, crash_before_handler=True)
                acts.append((f"pull+crash {k}", pull_crash))
    if w.crashes < budget.crashes:
        for p in sorted(w.engines):
            def crash(w, p=p):
                w.crashes += 1
                _crash(w, p)
            acts.append((f"crash {p.short}", crash))
    if w.ticks < budget.ticks:
        def tick(w):
            w.ticks += 1
            _tick(w, budget.tick_step)
        acts.append(("tick", tick))
    return acts


def explore(name: str, world: World, budget: Budget, max_states: int = 2_000_000) -> Report:
    rep = Report(name)
    seen: set[bytes] = set()
    stack = [world]
    while stack:
        w = stack.pop()
        k = w.key()
        if k in seen:
            continue
        seen.add(k)
        rep.states += 1
        if rep.states > max_states:
            rep.violations.append("state budget exhausted")
            break
        bad = _check_path(w)
        if bad:
            rep.violations.extend(bad)
            continue
        acts = _actions(w, budget)
        if not w.net and not any(_pull_enabled(w, k) for k in w.pulls):
            rep.leaves += 1
            final = _settle(w)
            bad = _check_path(final) + _check_agreement(final)
            if bad:
                rep.violations.extend(bad)
        for _, act in acts:
            nxt = w.clone()
            act(nxt)
            stack.append(nxt)
    return rep


# ----- scenarios -----

def _ids(n: int) -> list[PeerId]:
    return [derive_peer_id(f"mc-node-{i}".encode()) for i in range(n)]


SIZE = 50_000_000


def _world(n: int, N_r: int, avail: list[float], committed: list[int], decile=(), unreachable=()) -> World:
    ids = _ids(n)
    owner = ids[0]
    policy = PolicyConfig(N_r=N_r, Des_Tb=3600, Des_Tr=3600)
    engines = {p: ContractEngine(p, policy, DataCatalog(), ReplicaIndex(), EngineConfig(commit_period=24 * HOUR))
               for p in ids}
    # 10 GB already contracted everywhere, so availability drives transfer-time estimates
    profiles = {p: PeerProfile(p, a, 1_000_000, 10**12, 10**10) for p, a in zip(ids, avail)}
    w = World(engines, owner, profiles, frozenset(ids[i] for i in decile), frozenset(ids[i] for i in unreachable))
    entry = engines[owner].add_chunk(SIZE)
    chunk = entry.meta.chunk
    for i in committed:
        r = ids[i]
        entry.contracts[r] = Contract(chunk, r, COMMITTED, last_commit_at=0.0, data_present=True, acked_version=0)
        engines[r].replicas.put(ReplicaRecord(chunk, SIZE, COMMITTED, 0, 0, (owner,)))
        w.disks.setdefault(r, {})[chunk] = 0
    if committed:
        entry.last_commit_at = 0.0
    w.now = 25 * HOUR
    return w


def _offer(w: World, i: int) -> None:
    ids = _ids(len(w.engines))
    p = ids[i]
    chunk = ChunkId(w.owner, 0)
    w.net.append(Msg(p, w.owner, MsgType.OFFER, Offer(p, chunk, 0, w.profiles[p]).to_wire()))


def scenario_swap() -> World:
    """Three nodes: a well-available newcomer displaces a poorly available replicator."""
    w = _world(3, 1, [1.0, 0.1, 0.9], [1])
    _offer(w, 2)
    return w


def scenario_fill_then_swap() -> World:
    """Four nodes: two adds fill the placement, a third offer swaps one out."""
    w = _world(4, 2, [1.0, 0.1, 0.5, 0.9], [])
    for i in (1, 2, 3):
        _offer(w, i)
    return w


def scenario_double_swap() -> World:
    """Five nodes: two competing swaps against a committed placement within one commit period."""
    w = _world(5, 2, [1.0, 0.1, 0.2, 0.8, 0.9], [1, 2])
    _offer(w, 3)
    _offer(w, 4)
    return w


def scenario_async_revoke() -> World:
    """Four nodes: the victim is offline but in the lowest availability decile."""
    w = _world(4, 2, [1.0, 0.02, 0.5, 0.9], [1, 2], decile=[1], unreachable=[1])
    _offer(w, 3)
    return w


SCENARIOS = {
    "swap": (scenario_swap, Budget(drops=1, crashes=1, ticks=2)),
    "fill_then_swap": (scenario_fill_then_swap, Budget(drops=0, crashes=0, ticks=2)),
    "fill_then_swap_faults": (scenario_fill_then_swap, Budget(drops=1, crashes=1, ticks=1)),
    "double_swap": (scenario_double_swap, Budget(drops=1, crashes=1, ticks=2)),
    "async_revoke": (scenario_async_revoke, Budget(drops=1, crashes=1, ticks=2)),
}


def check_all(names=None) -> list[Report]:
    out = []
    for name in names or SCENARIOS:
        build, budget = SCENARIOS[name]
        out.append(explore(name, build(), budget))
    return out
