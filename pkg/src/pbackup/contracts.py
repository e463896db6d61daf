"""Per-node contract state machine.

Owner side: offers, swaps with explicit revocation, periodic commits, the
transfer handshake (pull, ack, delete at the old location) and repair.
Replicator side: the replicated-chunk index, pulls of newer versions, repair
corrections and rebuild replies.

Handlers are sans-IO.  They mutate the catalog/index (which journal every
change) and return a list of effects for the runtime to execute.
"""
from __future__ import annotations

import enum
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

from .catalog import DataCatalog, ReplicaIndex
from .model import (
    CatalogEntry,
    ChunkId,
    ChunkMeta,
    Contract,
    ContractState,
    PeerId,
    PeerProfile,
    Placement,
    PolicyConfig,
    ReplicaRecord,
)
from .protocol import (
    CancelPull,
    DropData,
    MsgType,
    Note,
    Send,
    SendAsync,
    StartPull,
    ids_from_wire,
    ids_to_wire,
)
from .utility import UtilityScore, placement_utility, strictly_better

log = logging.getLogger(__name__)

TENTATIVE = ContractState.TENTATIVE
COMMITTED = ContractState.COMMITTED
REVOKE_PENDING = ContractState.REVOKE_PENDING


class RevokeMode(enum.Enum):
    ONLINE = "online"
    ASYNC = "async"


class PolicyViolation(Exception):
    """Asynchronous revocation requested for a replicator outside the first decile."""


@dataclass(frozen=True)
class EngineConfig:
    commit_period: float = 24 * 3600.0
    eager_fill: bool = True  # commits that only add redundancy are not gated
    repair_period: float = 600.0


@dataclass(frozen=True)
class Offer:
    proposer: PeerId
    chunk: ChunkId
    version: int
    profile: PeerProfile

    def to_wire(self) -> dict:
        p = self.profile
        return {
            "chunk": str(self.chunk),
            "version": self.version,
            "profile": [p.p_av, p.bandwidth_B, p.free_space, p.load, p.stamp],
        }

    @classmethod
    def from_wire(cls, sender: PeerId, body: dict) -> "Offer":
        p_av, bw, free, load, stamp = body["profile"]
        return cls(sender, ChunkId.parse(body["chunk"]), int(body["version"]),
                   PeerProfile(sender, float(p_av), float(bw), int(free), int(load), float(stamp)))


class DecisionKind(enum.Enum):
    ADD = "add"
    SWAP = "swap"
    REJECT = "reject"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    victim: PeerId | None = None
    reason: str = ""
    current: float | None = None
    proposed: float | None = None


@dataclass
class EvalContext:
    """What the owner knows about other peers when scoring placements."""

    profiles: Mapping[PeerId, PeerProfile]
    dist: Callable[[PeerId], float]
    first_decile: Callable[[PeerId], bool] = lambda p: False
    reachable: Callable[[PeerId], bool] = lambda p: True
    load_adjust: Mapping[PeerId, float] = field(default_factory=dict)  # assignments newer than the profile

    def load_of(self, peer: PeerId) -> float:
        prof = self.profiles.get(peer)
        base = 0 if prof is None else prof.load
        return max(0.0, base + self.load_adjust.get(peer, 0))


@dataclass(frozen=True)
class DigestEntry:
    chunk: ChunkId
    counterparty: PeerId
    role: str  # "owner" when sent by the owner, "replica" when sent by the replicator
    version: int
    state: ContractState
    acked_version: int = -1
    size: int = 0


@dataclass(frozen=True)
class RepairDigest:
    sender: PeerId
    entries: tuple[DigestEntry, ...]

    def to_wire(self) -> dict:
        return {
            "entries": [
                [str(e.chunk), e.counterparty.hex(), e.role, e.version, int(e.state), e.acked_version, e.size]
                for e in self.entries
            ]
        }

    @classmethod
    def from_wire(cls, sender: PeerId, body: dict) -> tuple["RepairDigest", int]:
        entries, bad = [], 0
        for raw in body.get("entries", []):
            try:
                chunk, cp, role, version, state, acked, size = raw
                entries.append(DigestEntry(ChunkId.parse(chunk), PeerId.from_hex(cp), str(role), int(version),
                                           ContractState(int(state)), int(acked), int(size)))
            except (ValueError, TypeError):
                bad += 1
        return cls(sender, tuple(entries)), bad


@dataclass
class PendingSwap:
    proposer: PeerId
    victim: PeerId
    profile: PeerProfile
    started_at: float


@dataclass
class ContractEngine:
    me: PeerId
    policy: PolicyConfig
    catalog: DataCatalog
    replicas: ReplicaIndex
    cfg: EngineConfig = field(default_factory=EngineConfig)
    pending_swaps: dict[ChunkId, PendingSwap] = field(default_factory=dict)
    catalog_lost: bool = False  # set after non-transient local failure until rebuilt
    migrations: list[tuple[ChunkId, float]] = field(default_factory=list)

    # ----- owner: chunks and scoring -----

    def add_chunk(self, size: int) -> CatalogEntry:
        return self.catalog.new_chunk(self.me, size)

    def bump_version(self, chunk: ChunkId) -> int:
        entry = self.catalog.entries[chunk]
        entry.meta = ChunkMeta(chunk, entry.meta.size, entry.meta.version + 1)
        self.catalog.touch(chunk)
        return entry.meta.version

    def score(self, entry: CatalogEntry, ctx: EvalContext, replicators=None,
              extra_load: Mapping[PeerId, float] | None = None) -> UtilityScore:
        reps = frozenset(entry.active_replicators() if replicators is None else replicators)
        load = {j: ctx.load_of(j) for j in reps}
        if extra_load:
            load.update(extra_load)
        extra = 0
        if self.policy.count_revoke_pending:
            extra = sum(1 for c in entry.contracts.values() if c.state is REVOKE_PENDING)
        return placement_utility(Placement(entry.meta, reps), ctx.profiles, load, ctx.dist, self.policy, extra)

    def evaluate_offer(self, offer: Offer, ctx: EvalContext) -> Decision:
        entry = self.catalog.get(offer.chunk)
        if entry is None or offer.chunk.owner != self.me:
            return Decision(DecisionKind.REJECT, reason="unknown chunk")
        if self.catalog_lost:
            return Decision(DecisionKind.REJECT, reason="rebuilding")
        if offer.version < entry.meta.version:
            return Decision(DecisionKind.REJECT, reason="stale offer")
        i = offer.proposer
        if i == self.me or i in entry.contracts:
            return Decision(DecisionKind.REJECT, reason="already a replicator")
        if offer.chunk in self.pending_swaps:
            return Decision(DecisionKind.REJECT, reason="swap in progress")
        active = sorted(entry.active_replicators())
        if len(active) < self.policy.N_r:
            return Decision(DecisionKind.ADD)
        profiles = dict(ctx.profiles)
        profiles[i] = offer.profile
        cctx = EvalContext(profiles, ctx.dist, ctx.first_decile, ctx.reachable, ctx.load_adjust)
        current = self.score(entry, cctx).value
        new_load = {i: cctx.load_of(i) + entry.meta.size}
        best_j, best_u = None, None
        for j in active:
            cand = [r for r in active if r != j] + [i]
            u = self.score(entry, cctx, cand, new_load).value
            if best_u is None or u > best_u:
                best_j, best_u = j, u
        if strictly_better(best_u, current, self.policy.equality_band):
            return Decision(DecisionKind.SWAP, victim=best_j, current=current, proposed=best_u)
        return Decision(DecisionKind.REJECT, reason="no improvement", current=current, proposed=best_u)

    # ----- owner: offers and revocation -----

    def handle_offer(self, offer: Offer, ctx: EvalContext, now: float) -> tuple[Decision, list]:
        decision = self.evaluate_offer(offer, ctx)
        if decision.kind is DecisionKind.ADD:
            entry = self.catalog.entries[offer.chunk]
            entry.contracts[offer.proposer] = Contract(offer.chunk, offer.proposer, TENTATIVE, negotiated_at=now)
            self.catalog.touch(offer.chunk)
            return decision, [self._decision_msg(offer, True, entry, ctx), Note("added", {"chunk": offer.chunk, "peer": offer.proposer})]
        if decision.kind is DecisionKind.SWAP:
            return decision, self._start_swap(offer, decision.victim, ctx, now)
        entry = self.catalog.get(offer.chunk)
        return decision, [self._decision_msg(offer, False, entry, ctx, decision.reason)]

    def _decision_msg(self, offer: Offer, accepted: bool, entry: CatalogEntry | None, ctx: EvalContext,
                      reason: str = "") -> Send:
        body = {"chunk": str(offer.chunk), "accepted": accepted, "reason": reason}
        if entry is not None:
            body["size"] = entry.meta.size
            body["version"] = entry.meta.version
            try:
                body["utility"] = self.score(entry, ctx).value
            except Exception:  # missing profiles: the proposer just keeps its stale entry
                pass
        return Send(offer.proposer, MsgType.OFFER_DECISION, body)

    def _start_swap(self, offer: Offer, victim: PeerId, ctx: EvalContext, now: float) -> list:
        if ctx.reachable(victim):
            self.pending_swaps[offer.chunk] = PendingSwap(offer.proposer, victim, offer.profile, now)
            return self.revoke_contract(offer.chunk, victim, RevokeMode.ONLINE, ctx, now)
        return self._fallback_async(offer.chunk, offer.proposer, victim, offer.profile, ctx, now)

    def _fallback_async(self, chunk: ChunkId, proposer: PeerId, victim: PeerId, profile: PeerProfile,
                        ctx: EvalContext, now: float) -> list:
        entry = self.catalog.get(chunk)
        offer = Offer(proposer, chunk, entry.meta.version if entry else 0, profile)
        if entry is None or victim not in entry.contracts:
            return [self._decision_msg(offer, False, entry, ctx, "victim gone")]
        if not ctx.first_decile(victim):
            return [self._decision_msg(offer, False, entry, ctx, "victim offline"),
                    Note("swap_deferred", {"chunk": chunk, "victim": victim})]
        effects = self.revoke_contract(chunk, victim, RevokeMode.ASYNC, ctx, now)
        effects += self._install_replacement(entry, victim, proposer, now, had_data=None)
        effects.append(self._decision_msg(offer, True, entry, ctx))
        return effects

    def revoke_contract(self, chunk: ChunkId, replicator: PeerId, mode: RevokeMode, ctx: EvalContext,
                        now: float) -> list:
        entry = self.catalog.get(chunk)
        if entry is None or replicator not in entry.contracts:
            return []
        if mode is RevokeMode.ONLINE:
            return [Send(replicator, MsgType.REVOKE, {"chunk": str(chunk)}, track=True)]
        if not ctx.first_decile(replicator):
            raise PolicyViolation(f"{replicator.short} is not in the first availability decile")
        c = entry.contracts[replicator]
        c.state = REVOKE_PENDING
        self.catalog.touch(chunk)
        return [SendAsync(replicator, {"revoke": [str(chunk)]}), Note("revoked_async", {"chunk": chunk, "peer": replicator})]

    def _install_replacement(self, entry: CatalogEntry, victim: PeerId, proposer: PeerId, now: float,
                             had_data: bool | None) -> list:
        chunk = entry.meta.chunk
        old = entry.contracts[victim]
        keeps_data = old.data_present or bool(had_data)
        replaces = victim
        if keeps_data or had_data is None:
            # old copy stays until the newcomer acknowledges its download
            old.state = REVOKE_PENDING
            old.replaced_by = proposer
            old.data_present = keeps_data
            if not keeps_data:
                replaces = old.replaces
        else:
            replaces = old.replaces
            del entry.contracts[victim]
        # any older copy waiting on the victim now waits on the proposer
        for c in entry.contracts.values():
            if c.state is REVOKE_PENDING and c.replaced_by == victim and c.replicator != victim:
                c.replaced_by = proposer
                replaces = c.replicator if replaces is None else replaces
        entry.contracts[proposer] = Contract(chunk, proposer, TENTATIVE, negotiated_at=now, replaces=replaces)
        self.catalog.touch(chunk)
        return [Note("swapped", {"chunk": chunk, "victim": victim, "peer": proposer})]

    def on_revoke_ack(self, sender: PeerId, body: dict, ctx: EvalContext, now: float) -> list:
        chunk = ChunkId.parse(body["chunk"])
        had_data = bool(body.get("had_data"))
        entry = self.catalog.get(chunk)
        pending = self.pending_swaps.get(chunk)
        if pending is not None and pending.victim == sender:
            del self.pending_swaps[chunk]
            if entry is None or sender not in entry.contracts:
                return []
            offer = Offer(pending.proposer, chunk, entry.meta.version, pending.profile)
            effects = self._install_replacement(entry, sender, pending.proposer, now, had_data)
            effects.append(self._decision_msg(offer, True, entry, ctx))
            return effects
        if entry is not None:
            c = entry.contracts.get(sender)
            if c is not None and c.state is REVOKE_PENDING and not had_data and not c.data_present:
                del entry.contracts[sender]
                self.catalog.touch(chunk)
        return []

    def on_revoke_failed(self, dst: PeerId, body: dict, ctx: EvalContext, now: float) -> list:
        chunk = ChunkId.parse(body["chunk"])
        pending = self.pending_swaps.get(chunk)
        if pending is None or pending.victim != dst:
            return []
        del self.pending_swaps[chunk]
        return self._fallback_async(chunk, pending.proposer, dst, pending.profile, ctx, now)

    def expire_pending_swaps(self, now: float, timeout: float, ctx: EvalContext) -> list:
        effects = []
        for chunk, p in list(self.pending_swaps.items()):
            if now - p.started_at > timeout:
                del self.pending_swaps[chunk]
                entry = self.catalog.get(chunk)
                offer = Offer(p.proposer, chunk, entry.meta.version if entry else 0, p.profile)
                effects.append(self._decision_msg(offer, False, entry, ctx, "revocation timed out"))
        return effects

    # ----- owner: commits and transfers -----

    def sources_for(self, entry: CatalogEntry, version: int | None = None) -> tuple[PeerId, ...]:
        reps = sorted(p for p, c in entry.contracts.items()
                      if c.data_present and (version is None or c.acked_version >= version))
        return (self.me, *reps)

    def commit_due_contracts(self, now: float, ctx: EvalContext) -> list:
        effects = []
        for chunk, entry in self.catalog.entries.items():
            tentative = [c for c in entry.contracts.values() if c.state is TENTATIVE]
            if not tentative or self.catalog_lost:
                continue
            migration = any(c.replaces is not None for c in tentative)
            gated = entry.last_commit_at is not None and now - entry.last_commit_at < self.cfg.commit_period
            if gated and (migration or not self.cfg.eager_fill):
                continue
            ready = [c for c in tentative if ctx.reachable(c.replicator)]
            if not ready:
                continue
            version = entry.meta.version
            sources = self.sources_for(entry)
            for c in ready:
                c.state = COMMITTED
                c.last_commit_at = now
                effects.append(Send(c.replicator, MsgType.COMMIT_NOTICE, {
                    "chunk": str(chunk), "size": entry.meta.size, "version": version,
                    "sources": ids_to_wire(sources)}, track=True))
            entry.last_commit_at = now
            self.catalog.touch(chunk)
            if any(c.replaces is not None for c in ready):
                self.migrations.append((chunk, now))
            effects.append(Note("commit", {"chunk": chunk, "migration": migration, "peers": [c.replicator for c in ready]}))
        effects += self._delete_orphans()
        return effects

    def on_commit_failed(self, dst: PeerId, body: dict) -> None:
        chunk = ChunkId.parse(body["chunk"])
        entry = self.catalog.get(chunk)
        c = entry.contracts.get(dst) if entry else None
        if c is not None and c.state is COMMITTED and not c.data_present:
            c.state = TENTATIVE
            c.last_commit_at = None
            self.catalog.touch(chunk)

    def on_transfer_ack(self, sender: PeerId, body: dict) -> list:
        chunk = ChunkId.parse(body["chunk"])
        version = int(body["version"])
        entry = self.catalog.get(chunk)
        if entry is None:
            return []
        c = entry.contracts.get(sender)
        if c is None or c.state is TENTATIVE:
            return []
        changed = not c.data_present or version > c.acked_version
        c.data_present = True
        c.acked_version = max(c.acked_version, version)
        effects = []
        if c.active:
            for old in list(entry.contracts.values()):
                if old.state is REVOKE_PENDING and old.replaced_by == sender:
                    del entry.contracts[old.replicator]
                    changed = True
                    effects.append(Send(old.replicator, MsgType.DELETE_ORDER, {"chunk": str(chunk)}))
                    effects.append(Note("delete_ordered", {"chunk": chunk, "peer": old.replicator}))
        if changed:
            self.catalog.touch(chunk)
        return effects

    def _delete_orphans(self) -> list:
        """Drop old copies no newcomer is waiting on once every active replica holds data."""
        effects = []
        for chunk, entry in self.catalog.entries.items():
            orphans = [c for c in entry.contracts.values()
                       if c.state is REVOKE_PENDING and c.replaced_by not in entry.contracts]
            if not orphans:
                continue
            active = [c for c in entry.contracts.values() if c.active]
            if not active or not all(c.data_present for c in active):
                continue
            for c in orphans:
                del entry.contracts[c.replicator]
                if c.data_present:
                    effects.append(Send(c.replicator, MsgType.DELETE_ORDER, {"chunk": str(chunk)}))
            self.catalog.touch(chunk)
        return effects

    def version_notice_payloads(self) -> dict[PeerId, dict]:
        """Full chunk->version map per committed replicator, so newer notices subsume older ones."""
        per_peer: dict[PeerId, dict] = {}
        for chunk, entry in self.catalog.entries.items():
            sources = ids_to_wire(self.sources_for(entry))
            for p, c in entry.contracts.items():
                if c.state is COMMITTED:
                    per_peer.setdefault(p, {"versions": []})["versions"].append(
                        [str(chunk), entry.meta.version, entry.meta.size, sources])
        return per_peer

    def owner_digest(self, replicator: PeerId) -> RepairDigest:
        entries = []
        for chunk, entry in self.catalog.entries.items():
            c = entry.contracts.get(replicator)
            if c is not None:
                entries.append(DigestEntry(chunk, replicator, "owner", entry.meta.version, c.state,
                                           c.acked_version if c.data_present else -1, entry.meta.size))
        return RepairDigest(self.me, tuple(entries))

    def replicator_digest(self, owner: PeerId) -> RepairDigest:
        entries = tuple(DigestEntry(r.chunk, owner, "replica", r.held_version, r.state, r.held_version, r.size)
                        for r in self.replicas.for_owner(owner))
        return RepairDigest(self.me, entries)

    def repair_targets(self) -> tuple[list[PeerId], list[PeerId]]:
        """Replicators to send owner digests to, and owners to send replica digests to."""
        reps = sorted({p for e in self.catalog.entries.values() for p in e.contracts})
        owners = sorted({r.chunk.owner for r in self.replicas.records.values()})
        return ([] if self.catalog_lost else reps), owners

    def on_replica_digest(self, digest: RepairDigest) -> list:
        """Owner side: accept re-acks, then answer with the authoritative digest."""
        if self.catalog_lost:
            return []
        effects = []
        for e in digest.entries:
            if e.chunk.owner != self.me:
                continue
            entry = self.catalog.get(e.chunk)
            c = entry.contracts.get(digest.sender) if entry else None
            if c is not None and e.acked_version >= 0 and (not c.data_present or e.acked_version > c.acked_version):
                effects += self.on_transfer_ack(digest.sender, {"chunk": str(e.chunk), "version": e.acked_version})
        mine = self.owner_digest(digest.sender)
        effects.append(Send(digest.sender, MsgType.REPAIR_DIGEST, {"role": "owner", **mine.to_wire()}))
        return effects

    def recover_after_restart(self) -> None:
        """Forget volatile state after a crash: in-flight swaps and downloads are gone."""
        self.pending_swaps.clear()
        for chunk, rec in self.replicas.records.items():
            if rec.target_version > rec.held_version:
                rec.target_version = rec.held_version
                self.replicas.touch(chunk)

    # ----- replicator side -----

    def on_offer_decision(self, owner: PeerId, body: dict) -> list:
        chunk = ChunkId.parse(body["chunk"])
        if chunk.owner != owner:
            return []
        if body.get("accepted"):
            rec = self.replicas.get(chunk)
            if rec is None:
                self.replicas.put(ReplicaRecord(chunk, int(body.get("size", 0)), TENTATIVE))
            else:
                rec.state = TENTATIVE if rec.state is REVOKE_PENDING else rec.state
                self.replicas.touch(chunk)
            return [Note("offer_accepted", {"chunk": chunk, "owner": owner})]
        return [Note("offer_rejected", {"chunk": chunk, "owner": owner, "reason": body.get("reason", "")})]

    def on_revoke(self, owner: PeerId, chunk: ChunkId, reply: bool = True) -> list:
        if chunk.owner != owner:
            return []
        rec = self.replicas.get(chunk)
        had = rec is not None and rec.data_present
        effects: list = []
        if rec is not None:
            if had:
                rec.state = REVOKE_PENDING
                rec.target_version = rec.held_version
                self.replicas.touch(chunk)
            else:
                self.replicas.remove(chunk)
            effects.append(CancelPull(chunk))
        if reply:
            effects.append(Send(owner, MsgType.REVOKE_ACK, {"chunk": str(chunk), "had_data": had}))
        return effects

    def on_commit_notice(self, owner: PeerId, body: dict) -> list:
        chunk = ChunkId.parse(body["chunk"])
        if chunk.owner != owner:
            return []
        version, size = int(body["version"]), int(body["size"])
        sources = ids_from_wire(body.get("sources", [owner.hex()]))
        rec = self.replicas.get(chunk)
        if rec is None:
            rec = ReplicaRecord(chunk, size)
        rec.state = COMMITTED
        rec.size = size
        rec.sources = sources
        effects: list = []
        if rec.held_version >= version:
            effects.append(Send(owner, MsgType.TRANSFER_ACK, {"chunk": str(chunk), "version": rec.held_version}))
        elif rec.target_version < version or rec.target_version <= rec.held_version:
            rec.target_version = version
            effects.append(StartPull(chunk, version, size, sources))
        self.replicas.put(rec)
        return effects

    def on_pull_complete(self, chunk: ChunkId, version: int, owned: bool = False) -> list:
        if owned:
            return [Note("restored", {"chunk": chunk, "version": version})]
        rec = self.replicas.get(chunk)
        if rec is None or rec.state is TENTATIVE:
            return [DropData(chunk)]
        rec.held_version = max(rec.held_version, version)
        if rec.target_version < rec.held_version:
            rec.target_version = rec.held_version
        self.replicas.touch(chunk)
        return [Send(chunk.owner, MsgType.TRANSFER_ACK, {"chunk": str(chunk), "version": rec.held_version}),
                Note("replica_stored", {"chunk": chunk, "version": rec.held_version})]

    def on_pull_failed(self, chunk: ChunkId) -> None:
        rec = self.replicas.get(chunk)
        if rec is not None and rec.target_version > rec.held_version:
            rec.target_version = rec.held_version
            self.replicas.touch(chunk)

    def handle_version_notice(self, chunk: ChunkId, version: int, size: int = 0, sources=()) -> list:
        rec = self.replicas.get(chunk)
        if rec is None:
            log.debug("version notice for unknown chunk %s", chunk)
            return [Note("notice_ignored", {"chunk": chunk})]
        if rec.state is not COMMITTED:
            return []
        if version <= rec.held_version or version <= rec.target_version:
            return []
        rec.target_version = version
        if sources:
            rec.sources = tuple(sources)
        if size:
            rec.size = size
        self.replicas.touch(chunk)
        return [StartPull(chunk, version, rec.size, rec.sources or (chunk.owner,))]

    def on_version_payload(self, owner: PeerId, payload: dict) -> list:
        effects = []
        for chunk_s, version, size, sources in payload.get("versions", []):
            chunk = ChunkId.parse(chunk_s)
            if chunk.owner == owner:
                effects += self.handle_version_notice(chunk, int(version), int(size), ids_from_wire(sources))
        for chunk_s in payload.get("revoke", []):
            effects += self.on_revoke(owner, ChunkId.parse(chunk_s))
        return effects

    def on_delete_order(self, sender: PeerId, chunk: ChunkId) -> list:
        if sender != chunk.owner:
            return [Note("unauthorized_delete", {"chunk": chunk, "sender": sender})]
        rec = self.replicas.get(chunk)
        if rec is None:
            return []
        self.replicas.remove(chunk)
        return [CancelPull(chunk), DropData(chunk)]

    def repair_exchange(self, digest: RepairDigest, malformed: int = 0) -> tuple[list, list]:
        """Replicator side: adopt the owner's view.  Returns (corrections, effects)."""
        owner = digest.sender
        mine = {r.chunk: r for r in self.replicas.for_owner(owner)}
        corrections: list = []
        effects: list = []
        listed = set()
        for e in digest.entries:
            if e.chunk.owner != owner or e.counterparty != self.me:
                malformed += 1
                continue
            listed.add(e.chunk)
            rec = mine.get(e.chunk)
            if rec is None:
                if e.state is REVOKE_PENDING:
                    effects.append(Send(owner, MsgType.REVOKE_ACK, {"chunk": str(e.chunk), "had_data": False}))
                    corrections.append(("ack_revoke", e.chunk))
                    continue
                rec = ReplicaRecord(e.chunk, e.size, e.state)
                self.replicas.put(rec)
                corrections.append(("accept", e.chunk))
                if e.state is COMMITTED:
                    rec.target_version = e.version
                    self.replicas.touch(e.chunk)
                    effects.append(StartPull(e.chunk, e.version, e.size, (owner,)))
                continue
            if e.state is REVOKE_PENDING:
                if rec.state is not REVOKE_PENDING:
                    effects += self.on_revoke(owner, e.chunk)
                    corrections.append(("revoke", e.chunk))
                elif not rec.data_present:
                    effects += self.on_revoke(owner, e.chunk)
                continue
            if rec.state is not e.state:
                rec.state = e.state
                if e.size:
                    rec.size = e.size
                self.replicas.touch(e.chunk)
                corrections.append(("state", e.chunk))
            if rec.state is COMMITTED:
                if e.version > rec.held_version and e.version > rec.target_version:
                    rec.target_version = e.version
                    self.replicas.touch(e.chunk)
                    effects.append(StartPull(e.chunk, e.version, rec.size, rec.sources or (owner,)))
                if rec.held_version >= 0 and rec.held_version > e.acked_version:
                    effects.append(Send(owner, MsgType.TRANSFER_ACK, {"chunk": str(e.chunk), "version": rec.held_version}))
                    corrections.append(("reack", e.chunk))
        for chunk, rec in mine.items():
            if chunk not in listed:
                self.replicas.remove(chunk)
                effects += [CancelPull(chunk), DropData(chunk)]
                corrections.append(("drop", chunk))
        if malformed:
            effects.append(Note("malformed_digest", {"count": malformed, "sender": owner}))
        return corrections, effects

    def rebuild_reply(self, owner: PeerId) -> dict:
        return {"records": [[str(r.chunk), r.size, r.held_version, int(r.state)] for r in self.replicas.for_owner(owner)]}

    def install_rebuilt(self, catalog: DataCatalog) -> list:
        """Adopt a rebuilt catalog and restore every chunk from its replicators."""
        for entry in catalog.entries.values():
            self.catalog.put(entry)
        self.catalog.next_index = max(self.catalog.next_index, catalog.next_index)
        self.catalog_lost = False
        effects = []
        for chunk, entry in self.catalog.entries.items():
            srcs = tuple(p for p in self.sources_for(entry) if p != self.me)
            if srcs:
                effects.append(StartPull(chunk, 0, entry.meta.size, srcs, owned=True))
        return effects


def rebuild_catalog(me: PeerId, responses: Mapping[PeerId, dict]) -> DataCatalog:
    """Union of replicator-reported contracts; the highest reported version wins."""
    catalog = DataCatalog()
    if not responses:
        log.warning("rebuild: no replicator answered; data unrecoverable from reachable peers")
        return catalog
    for replicator in sorted(responses):
        for chunk_s, size, held, state in responses[replicator].get("records", []):
            chunk = ChunkId.parse(chunk_s)
            if chunk.owner != me or replicator == me:
                continue
            entry = catalog.entries.get(chunk)
            version = max(int(held), 0)
            if entry is None:
                entry = CatalogEntry(ChunkMeta(chunk, int(size), version))
                catalog.entries[chunk] = entry
            elif version > entry.meta.version:
                entry.meta = ChunkMeta(chunk, entry.meta.size, version)
            st = ContractState(int(state))
            entry.contracts[replicator] = Contract(
                chunk, replicator, st, data_present=int(held) >= 0, acked_version=int(held))
            catalog.next_index = max(catalog.next_index, chunk.index + 1)
    for entry in catalog.entries.values():
        if any(c.state is COMMITTED for c in entry.contracts.values()):
            entry.last_commit_at = 0.0
    return catalog
