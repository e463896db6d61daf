"""A complete protocol node without I/O.

The runtime (simulator or TCP daemon) feeds it messages, delivery outcomes,
timer ticks and transfer completions; the node answers with effects.  The
data plane (moving chunk bytes) belongs to the runtime: the node only asks
for pulls and learns when they finish.
"""
from __future__ import annotations

import logging
import random
from collections.abc import Callable
from dataclasses import dataclass, field

from .catalog import DataCatalog, ReplicaIndex
from .contracts import (
    ContractEngine,
    EngineConfig,
    EvalContext,
    Offer,
    RepairDigest,
    rebuild_catalog,
)
from .messaging import AsyncMessage, Outcome, SyncMessenger
from .model import ChunkId, ContractState, PeerDescriptor, PeerId, PeerProfile, PolicyConfig
from .optimizer import OptimizerConfig, QueueEntry, TabooList, WorstQueue, optimizer_tick
from .protocol import DropData, MsgType, Note, Send, SendAsync, StartPull
from .utility import UtilityError

log = logging.getLogger(__name__)

COMMITTED = ContractState.COMMITTED
REVOKE_PENDING = ContractState.REVOKE_PENDING


@dataclass(frozen=True)
class NodeParams:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    relay_tick: float = 60.0
    maintenance_period: float = 300.0
    offer_timeout: float = 300.0
    swap_timeout: float = 1800.0
    rebuild_wait: float = 600.0
    profile_ttl: float = 7 * 86400.0


@dataclass
class Rebuild:
    deadline: float
    responses: dict[PeerId, dict] = field(default_factory=dict)


class Node:
    def __init__(
        self,
        me: PeerId,
        params: NodeParams,
        *,
        bandwidth: float,
        quota: int,
        seed: int,
        catalog: DataCatalog | None = None,
        replicas: ReplicaIndex | None = None,
        messenger: SyncMessenger | None = None,
        dist: Callable[[PeerId], float] = lambda p: 0.0,
        reachable: Callable[[PeerId], bool] = lambda p: True,
        resolve: Callable[[PeerId], PeerDescriptor | None] = lambda p: None,
        members: Callable[[], list[PeerId]] = list,
    ):
        self.me = me
        self.params = params
        self.bandwidth = bandwidth
        self.quota = quota
        self.p_av = 1.0
        self.rng = random.Random(seed)
        # an empty catalog is falsy, so test for None explicitly to keep its journal
        catalog = DataCatalog() if catalog is None else catalog
        replicas = ReplicaIndex() if replicas is None else replicas
        self.engine = ContractEngine(me, params.policy, catalog, replicas,
                                     params.engine)
        self.messenger = SyncMessenger(me) if messenger is None else messenger
        self.queue = WorstQueue(params.optimizer.queue_capacity)
        self.taboo = TabooList()
        self.profiles: dict[PeerId, PeerProfile] = {}
        self.adjust: dict[PeerId, list[tuple[float, float]]] = {}  # peer -> [(stamp, delta)]
        self.outstanding: tuple[PeerId, ChunkId, float] | None = None
        self.rebuild: Rebuild | None = None
        self.dist = dist
        self.reachable = reachable
        self.resolve = resolve
        self.members = members

    # ----- views -----

    @property
    def catalog(self) -> DataCatalog:
        return self.engine.catalog

    @property
    def replicas(self) -> ReplicaIndex:
        return self.engine.replicas

    def occupied(self) -> int:
        return sum(r.size for r in self.replicas.records.values())

    def free_space(self) -> int:
        return self.quota - self.occupied()

    def own_profile(self, now: float) -> PeerProfile:
        return PeerProfile(self.me, self.p_av, self.bandwidth, max(0, self.free_space()),
                           self.replicas.contracted_bytes(), now)

    def learn_profile(self, prof: PeerProfile) -> None:
        if prof.peer == self.me:
            return
        cur = self.profiles.get(prof.peer)
        if cur is None or prof.stamp > cur.stamp:
            self.profiles[prof.peer] = prof
            pending = self.adjust.get(prof.peer)
            if pending:
                keep = [(s, d) for s, d in pending if s > prof.stamp]
                if keep:
                    self.adjust[prof.peer] = keep
                else:
                    del self.adjust[prof.peer]

    def _note_assignment(self, peer: PeerId, delta: float, now: float) -> None:
        self.adjust.setdefault(peer, []).append((now, delta))

    def context(self, now: float) -> EvalContext:
        profiles = dict(self.profiles)
        profiles[self.me] = self.own_profile(now)
        avs = sorted(p.p_av for p in profiles.values())
        cut = avs[max(0, len(avs) // 10 - 1)] if len(avs) >= 10 else -1.0

        def first_decile(peer: PeerId) -> bool:
            prof = profiles.get(peer)
            return prof is not None and prof.p_av <= cut

        adjust = {p: sum(d for _, d in v) for p, v in self.adjust.items()}
        return EvalContext(profiles, self.dist, first_decile, self.reachable, adjust)

    def chunk_utility(self, chunk: ChunkId, now: float) -> float | None:
        entry = self.catalog.get(chunk)
        if entry is None:
            return None
        try:
            return self.engine.score(entry, self.context(now)).value
        except UtilityError:
            return None

    def synchro_set(self, peer: PeerId) -> tuple[PeerId, ...]:
        desc = self.resolve(peer)
        if desc is None:
            return (peer,)
        return tuple(desc.synchro_peers)

    # ----- effect post-processing -----

    def _expand(self, effects: list, now: float) -> list:
        out = []
        for e in effects:
            if isinstance(e, SendAsync):
                _, attempts = self.messenger.send_async(e.dst, e.payload, self.synchro_set(e.dst))
                out += [Send(p, MsgType.ASYNC_RELAY, m.to_wire(), track=True) for p, m in attempts]
            elif isinstance(e, Note) and e.kind == "offer_rejected":
                self.taboo.add(e.data["owner"], now, self.params.optimizer.taboo_ttl)
                out.append(e)
            elif isinstance(e, Note) and e.kind in ("added", "swapped"):
                size = self.catalog.entries[e.data["chunk"]].meta.size
                self._note_assignment(e.data["peer"], size, now)
                if "victim" in e.data:
                    self._note_assignment(e.data["victim"], -size, now)
                out.append(e)
            else:
                out.append(e)
        return out

    # ----- owner API -----

    def add_data(self, nchunks: int, size: int) -> list[ChunkId]:
        return [self.engine.add_chunk(size).meta.chunk for _ in range(nchunks)]

    def modify_all(self, now: float) -> list:
        """Mark every owned chunk modified and notify replicators."""
        if self.engine.catalog_lost:
            return []
        for chunk in list(self.catalog.entries):
            self.engine.bump_version(chunk)
        return self.send_version_notices(now)

    def send_version_notices(self, now: float) -> list:
        effects = [SendAsync(p, payload) for p, payload in self.engine.version_notice_payloads().items()]
        return self._expand(effects, now)

    def declare_catalog_lost(self, now: float) -> list:
        """Local catalog gone for good: ask everybody what they hold for us."""
        self.engine.catalog_lost = True
        for chunk in list(self.catalog.entries):
            self.catalog.remove(chunk)
        self.rebuild = Rebuild(now + self.params.rebuild_wait)
        return [Send(p, MsgType.REBUILD_QUERY, {}) for p in self.members() if p != self.me]

    def _finish_rebuild(self, now: float) -> list:
        rb, self.rebuild = self.rebuild, None
        rebuilt = rebuild_catalog(self.me, rb.responses)
        effects = self.engine.install_rebuilt(rebuilt)
        kind = "rebuilt" if rb.responses else "rebuild_failed"
        effects.append(Note(kind, {"chunks": len(rebuilt), "responses": len(rb.responses)}))
        return effects

    # ----- timers -----

    def timer_periods(self) -> dict[str, float]:
        p = self.params
        return {
            "relay": p.relay_tick,
            "optimize": p.optimizer.period_T,
            "gossip": p.optimizer.period_T,
            "maintain": p.maintenance_period,
            "repair": p.engine.repair_period,
        }

    def on_timer(self, kind: str, now: float) -> list:
        if kind == "relay":
            return [Send(p, MsgType.ASYNC_RELAY, m.to_wire(), track=True) for p, m in self.messenger.relay_tick()]
        if kind == "optimize":
            return self._optimize(now)
        if kind == "gossip":
            return self._gossip(now)
        if kind == "maintain":
            return self._maintain(now)
        if kind == "repair":
            return self._repair(now)
        raise ValueError(f"unknown timer {kind!r}")

    def _optimize(self, now: float) -> list:
        if self.outstanding is not None:
            if now < self.outstanding[2]:
                return []
            self.taboo.add(self.outstanding[0], now, self.params.optimizer.taboo_ttl)
            self.outstanding = None
        held = set(self.replicas.records)
        entry = optimizer_tick(self.me, self.free_space(), self.queue, self.taboo, self.rng, now,
                               self.params.optimizer, held, self.reachable)
        if entry is None:
            return []
        self.outstanding = (entry.owner, entry.chunk, now + self.params.offer_timeout)
        offer = Offer(self.me, entry.chunk, entry.version, self.own_profile(now))
        return [Send(entry.owner, MsgType.OFFER, offer.to_wire(), track=True),
                Note("offer_sent", {"owner": entry.owner, "chunk": entry.chunk})]

    def refresh_own_entries(self, now: float) -> None:
        ctx = self.context(now)
        fresh = []
        for chunk, entry in self.catalog.entries.items():
            try:
                u = self.engine.score(entry, ctx).value
            except UtilityError:
                continue
            fresh.append(QueueEntry(chunk, u, now, entry.meta.size, entry.meta.version))
        self.queue.update(fresh)
        if self.params.optimizer.max_entry_age != float("inf"):
            self.queue.expire(now, self.params.optimizer.max_entry_age)

    def _gossip(self, now: float) -> list:
        self.refresh_own_entries(now)
        peers = [p for p in self.members() if p != self.me]
        if not peers:
            return []
        k = min(self.params.optimizer.fanout, len(peers))
        targets = self.rng.sample(peers, k)
        horizon = now - self.params.profile_ttl
        profs = [self.own_profile(now)] + [p for p in self.profiles.values() if p.stamp >= horizon]
        qbody = {"entries": [e.to_wire() for e in self.queue.ordered()]}
        pbody = {"profiles": [[p.peer.hex(), p.p_av, p.bandwidth_B, p.free_space, p.load, p.stamp] for p in profs]}
        out = []
        for t in targets:
            out.append(Send(t, MsgType.QUEUE_GOSSIP, qbody))
            out.append(Send(t, MsgType.PROFILE_GOSSIP, pbody))
        return out

    def _maintain(self, now: float) -> list:
        effects = []
        if self.rebuild is not None and now >= self.rebuild.deadline:
            effects += self._finish_rebuild(now)
        ctx = self.context(now)
        effects += self.engine.expire_pending_swaps(now, self.params.swap_timeout, ctx)
        effects += self.engine.commit_due_contracts(now, ctx)
        return self._expand(effects, now)

    def _repair(self, now: float) -> list:
        reps, owners = self.engine.repair_targets()
        out = []
        for r in reps:
            if self.reachable(r):
                out.append(Send(r, MsgType.REPAIR_DIGEST, {"role": "owner", **self.engine.owner_digest(r).to_wire()}))
        for o in owners:
            if self.reachable(o):
                out.append(Send(o, MsgType.REPAIR_DIGEST, {"role": "replica", **self.engine.replicator_digest(o).to_wire()}))
        return out

    # ----- messages -----

    def on_message(self, sender: PeerId, mtype: MsgType, body: dict, now: float) -> list:
        try:
            return self._expand(self._dispatch(sender, MsgType(mtype), body, now), now)
        except (KeyError, ValueError, TypeError) as exc:
            log.warning("malformed %s from %s: %s", mtype, sender.short, exc)
            return [Note("malformed", {"type": int(mtype), "sender": sender})]

    def _dispatch(self, sender: PeerId, mtype: MsgType, body: dict, now: float) -> list:
        eng = self.engine
        if mtype is MsgType.OFFER:
            offer = Offer.from_wire(sender, body)
            self.learn_profile(offer.profile)
            ctx = self.context(now)
            try:
                decision, effects = eng.handle_offer(offer, ctx, now)
            except UtilityError as exc:
                return [Send(sender, MsgType.OFFER_DECISION,
                             {"chunk": body["chunk"], "accepted": False, "reason": f"missing profile: {exc}"})]
            effects.append(Note("offer_decision", {"chunk": offer.chunk, "peer": sender, "kind": decision.kind.value,
                                                   "current": decision.current, "proposed": decision.proposed}))
            return effects
        if mtype is MsgType.OFFER_DECISION:
            chunk = ChunkId.parse(body["chunk"])
            if self.outstanding is not None and self.outstanding[1] == chunk:
                self.outstanding = None
            if "utility" in body:
                self.queue.update([QueueEntry(chunk, float(body["utility"]), now,
                                              int(body.get("size", 0)), int(body.get("version", 0)))])
            return eng.on_offer_decision(sender, body)
        if mtype is MsgType.REVOKE:
            return eng.on_revoke(sender, ChunkId.parse(body["chunk"]))
        if mtype is MsgType.REVOKE_ACK:
            return eng.on_revoke_ack(sender, body, self.context(now), now)
        if mtype is MsgType.COMMIT_NOTICE:
            return eng.on_commit_notice(sender, body)
        if mtype is MsgType.TRANSFER_ACK:
            chunk = ChunkId.parse(body["chunk"])
            effects = eng.on_transfer_ack(sender, body)
            effects.append(Note("acked", {"chunk": chunk, "peer": sender, "version": int(body["version"])}))
            return effects
        if mtype is MsgType.DELETE_ORDER:
            return eng.on_delete_order(sender, ChunkId.parse(body["chunk"]))
        if mtype is MsgType.REPAIR_DIGEST:
            digest, bad = RepairDigest.from_wire(sender, body)
            if body.get("role") == "owner":
                corrections, effects = eng.repair_exchange(digest, bad)
                if corrections:
                    effects.append(Note("repaired", {"owner": sender, "corrections": corrections}))
                return effects
            return eng.on_replica_digest(digest)
        if mtype is MsgType.REBUILD_QUERY:
            return [Send(sender, MsgType.REBUILD_REPLY, eng.rebuild_reply(sender))]
        if mtype is MsgType.REBUILD_REPLY:
            if self.rebuild is not None and body.get("records"):
                self.rebuild.responses[sender] = body
            return []
        if mtype is MsgType.ASYNC_RELAY:
            msg = AsyncMessage.from_wire(body)
            outcome, payload = self.messenger.on_receive(msg)
            if outcome is Outcome.EXECUTED:
                return eng.on_version_payload(msg.src, payload)
            return []
        if mtype is MsgType.QUEUE_GOSSIP:
            entries = []
            for raw in body.get("entries", []):
                try:
                    entries.append(QueueEntry.from_wire(raw))
                except (ValueError, TypeError):
                    continue
            self.queue.update(e for e in entries if e.owner != self.me)
            return []
        if mtype is MsgType.PROFILE_GOSSIP:
            for raw in body.get("profiles", []):
                try:
                    peer, p_av, bw, free, load, stamp = raw
                    self.learn_profile(PeerProfile(PeerId.from_hex(peer), float(p_av), float(bw), int(free),
                                                   int(load), float(stamp)))
                except (ValueError, TypeError):
                    continue
            return []
        if mtype is MsgType.STATUS_QUERY:
            return [Send(sender, MsgType.STATUS_REPLY, self.status(now))]
        return [Note("unhandled", {"type": int(mtype), "sender": sender})]

    def on_send_result(self, dst: PeerId, mtype: MsgType, body: dict, ok: bool, now: float) -> list:
        eng = self.engine
        if mtype is MsgType.ASYNC_RELAY:
            self.messenger.on_send_result(dst, AsyncMessage.from_wire(body), ok)
            return []
        if ok:
            return []
        if mtype is MsgType.OFFER:
            self.taboo.add(dst, now, self.params.optimizer.taboo_ttl)
            if self.outstanding is not None and self.outstanding[0] == dst:
                self.outstanding = None
            return [Note("owner_unreachable", {"owner": dst})]
        if mtype is MsgType.REVOKE:
            return self._expand(eng.on_revoke_failed(dst, body, self.context(now), now), now)
        if mtype is MsgType.COMMIT_NOTICE:
            eng.on_commit_failed(dst, body)
        return []

    # ----- data plane callbacks -----

    def on_pull_complete(self, chunk: ChunkId, version: int, owned: bool, now: float) -> list:
        return self.engine.on_pull_complete(chunk, version, owned)

    def on_pull_failed(self, chunk: ChunkId, now: float) -> list:
        self.engine.on_pull_failed(chunk)
        return []

    def held_version(self, chunk: ChunkId) -> int:
        """Version of ``chunk`` this node can serve, -1 if none."""
        if chunk.owner == self.me:
            entry = self.catalog.get(chunk)
            return -1 if entry is None or self.engine.catalog_lost else entry.meta.version
        rec = self.replicas.get(chunk)
        return -1 if rec is None else rec.held_version

    # ----- status -----

    def status(self, now: float) -> dict:
        by_state: dict[str, int] = {}
        contracts = []
        worst = None
        for chunk, entry in self.catalog.entries.items():
            for p, c in entry.contracts.items():
                by_state[c.state.name] = by_state.get(c.state.name, 0) + 1
                contracts.append([str(chunk), p.hex(), c.state.name, c.acked_version])
            u = self.chunk_utility(chunk, now)
            if u is not None and (worst is None or u < worst):
                worst = u
        return {
            "peer": self.me.hex(),
            "chunks": len(self.catalog),
            "contracts_by_state": by_state,
            "contracts": contracts,
            "replicas": len(self.replicas),
            "replica_bytes": self.replicas.contracted_bytes(),
            "worst_utility": worst,
            "pending_async": self.messenger.pending_count(),
            "catalog_lost": self.engine.catalog_lost,
        }


__all__ = ["Node", "NodeParams", "DropData", "StartPull"]
