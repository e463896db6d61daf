"""Off-line messaging through synchro-peers.

A message for ``dst`` is handed to every synchro-peer of ``dst`` (a set that
contains ``dst`` itself).  Each holder keeps at most one message per
(src, dst) pair: a higher sequence number supersedes the held one.  Holders
retry peers listed in the message's pending set until it is empty.  The target
executes a payload only if its sequence number beats the highest one already
executed for that sender.

The messenger is sans-IO: methods return the relay attempts to make, and the
caller reports each attempt's outcome with :meth:`SyncMessenger.on_send_result`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any

from .model import PeerId

Pair = tuple[PeerId, PeerId]


class Outcome(enum.Enum):
    STORED = "stored"
    SUPERSEDED = "superseded"
    EXECUTED = "executed"
    DUPLICATE = "duplicate"
    STALE_DROPPED = "stale-dropped"


@dataclass(frozen=True)
class AsyncMessage:
    src: PeerId
    dst: PeerId
    seq: int
    payload: Any
    pending_set: tuple[PeerId, ...] = ()

    @property
    def pair(self) -> Pair:
        return (self.src, self.dst)

    def to_wire(self) -> dict:
        return {
            "src": self.src.hex(),
            "dst": self.dst.hex(),
            "seq": self.seq,
            "pending": [p.hex() for p in self.pending_set],
            "payload": self.payload,
        }

    @classmethod
    def from_wire(cls, body: dict) -> "AsyncMessage":
        return cls(
            PeerId.from_hex(body["src"]),
            PeerId.from_hex(body["dst"]),
            int(body["seq"]),
            body["payload"],
            tuple(PeerId.from_hex(p) for p in body["pending"]),
        )


@dataclass
class SynchroState:
    pending: dict[Pair, AsyncMessage] = field(default_factory=dict)
    delivered_seq: dict[PeerId, int] = field(default_factory=dict)
    seen_seq: dict[Pair, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pending": [m.to_wire() for m in self.pending.values()],
            "delivered": {k.hex(): v for k, v in self.delivered_seq.items()},
            "seen": [[a.hex(), b.hex(), v] for (a, b), v in self.seen_seq.items()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynchroState":
        state = cls()
        for raw in data.get("pending", []):
            msg = AsyncMessage.from_wire(raw)
            state.pending[msg.pair] = msg
        state.delivered_seq = {PeerId.from_hex(k): v for k, v in data.get("delivered", {}).items()}
        state.seen_seq = {(PeerId.from_hex(a), PeerId.from_hex(b)): v for a, b, v in data.get("seen", [])}
        return state


class SyncMessenger:
    def __init__(self, me: PeerId, state: SynchroState | None = None, next_seq: dict | None = None):
        self.me = me
        self.state = state or SynchroState()
        self.next_seq: dict[PeerId, int] = dict(next_seq or {})

    # sender side

    def send_async(self, dst: PeerId, payload: Any, synchro_peers) -> tuple[AsyncMessage, list[tuple[PeerId, AsyncMessage]]]:
        """Create the next message for ``dst`` and return the first relay attempts."""
        synchro = tuple(synchro_peers)
        if dst not in synchro:
            raise ValueError("synchro-peer set of the target must contain the target")
        seq = self.next_seq.get(dst, 0) + 1
        self.next_seq[dst] = seq
        msg = AsyncMessage(self.me, dst, seq, payload, tuple(p for p in synchro if p != self.me))
        if self.me in synchro:
            self._hold_as_member(msg)
        else:
            self._hold(msg)
        held = self.state.pending.get(msg.pair)
        return msg, self._attempts(held) if held is not None else []

    # holder side

    def relay_tick(self) -> list[tuple[PeerId, AsyncMessage]]:
        attempts = []
        for msg in list(self.state.pending.values()):
            attempts.extend(self._attempts(msg))
        return attempts

    def _attempts(self, msg: AsyncMessage) -> list[tuple[PeerId, AsyncMessage]]:
        return [(p, msg) for p in msg.pending_set]

    def on_send_result(self, peer: PeerId, msg: AsyncMessage, ok: bool) -> None:
        if not ok:
            return
        held = self.state.pending.get(msg.pair)
        if held is None or held.seq != msg.seq or peer not in held.pending_set:
            return
        remaining = tuple(p for p in held.pending_set if p != peer)
        if remaining:
            self.state.pending[msg.pair] = replace(held, pending_set=remaining)
        else:
            del self.state.pending[msg.pair]

    def on_receive(self, msg: AsyncMessage) -> tuple[Outcome, Any]:
        """Handle an incoming relay.  Returns the outcome and the payload to execute (or None)."""
        executed = None
        if msg.dst == self.me:
            if msg.seq > self.state.delivered_seq.get(msg.src, 0):
                self.state.delivered_seq[msg.src] = msg.seq
                executed = msg.payload
        holder = self._hold_as_member(msg)
        if executed is not None:
            return Outcome.EXECUTED, executed
        if msg.dst == self.me and holder is not Outcome.STALE_DROPPED:
            return Outcome.DUPLICATE, None
        return holder, None

    def _hold_as_member(self, msg: AsyncMessage) -> Outcome:
        trimmed = tuple(p for p in msg.pending_set if p != self.me)
        return self._hold(replace(msg, pending_set=trimmed))

    def _hold(self, msg: AsyncMessage) -> Outcome:
        pair = msg.pair
        seen = self.state.seen_seq.get(pair, 0)
        if msg.seq < seen:
            return Outcome.STALE_DROPPED
        held = self.state.pending.get(pair)
        if msg.seq == seen:
            if held is not None and held.seq == msg.seq:
                # a peer is known reached if either copy says so
                merged = tuple(p for p in held.pending_set if p in msg.pending_set)
                if merged:
                    self.state.pending[pair] = replace(held, pending_set=merged)
                else:
                    del self.state.pending[pair]
            return Outcome.DUPLICATE
        self.state.seen_seq[pair] = msg.seq
        if msg.pending_set:
            self.state.pending[pair] = msg
        else:
            self.state.pending.pop(pair, None)
        return Outcome.SUPERSEDED if held is not None else Outcome.STORED

    def pending_count(self) -> int:
        return len(self.state.pending)
