"""Wire message types and the effects protocol handlers return to their runtime."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

from .model import ChunkId, PeerId


class MsgType(enum.IntEnum):
    OFFER = 1
    OFFER_DECISION = 2
    REVOKE = 3
    REVOKE_ACK = 4
    COMMIT_NOTICE = 5
    PULL_REQUEST = 6
    CHUNK_DATA = 7
    TRANSFER_ACK = 8
    DELETE_ORDER = 9
    REPAIR_DIGEST = 10
    REBUILD_QUERY = 11
    REBUILD_REPLY = 12
    ASYNC_RELAY = 13
    QUEUE_GOSSIP = 14
    REG_PUT = 15
    REG_GET = 16
    REG_ANTIENTROPY = 17
    PROFILE_GOSSIP = 18
    STATUS_QUERY = 19
    STATUS_REPLY = 20
    REG_REPLY = 21


@dataclass(frozen=True)
class Send:
    dst: PeerId
    mtype: MsgType
    body: dict
    track: bool = False  # report delivery outcome back to the sender


@dataclass(frozen=True)
class SendAsync:
    dst: PeerId
    payload: dict


@dataclass(frozen=True)
class StartPull:
    chunk: ChunkId
    version: int
    size: int
    sources: tuple[PeerId, ...]
    owned: bool = False


@dataclass(frozen=True)
class CancelPull:
    chunk: ChunkId


@dataclass(frozen=True)
class DropData:
    chunk: ChunkId


@dataclass(frozen=True)
class Note:
    """Event for metrics, logs, or other local components."""

    kind: str
    data: dict = field(default_factory=dict)


Effect = Send | SendAsync | StartPull | CancelPull | DropData | Note


def ids_to_wire(peers) -> list[str]:
    return [p.hex() for p in peers]


def ids_from_wire(raw) -> tuple[PeerId, ...]:
    return tuple(PeerId.from_hex(p) for p in raw)


def body_chunk(body: dict) -> ChunkId:
    return ChunkId.parse(body["chunk"])


Body = dict[str, Any]
