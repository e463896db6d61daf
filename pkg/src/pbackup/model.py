"""Domain types shared by every part of the backup engine."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

PEER_ID_BYTES = 32
DEFAULT_CHUNK_SIZE = 50_000_000


class PeerId(bytes):
    """Fixed-width peer identifier: SHA-256 of the peer's public key.

    Subclassing ``bytes`` keeps hashing and the total order (lexicographic)
    cheap, which matters in the simulator's hot loops.
    """

    def __new__(cls, raw: bytes):
        if len(raw) != PEER_ID_BYTES:
            raise ValueError(f"peer id must be {PEER_ID_BYTES} bytes, got {len(raw)}")
        return super().__new__(cls, raw)

    @classmethod
    def from_hex(cls, text: str) -> "PeerId":
        return cls(bytes.fromhex(text))

    @property
    def short(self) -> str:
        return self.hex()[:8]

    def __repr__(self) -> str:
        return f"PeerId({self.short})"

    def __str__(self) -> str:
        return self.hex()


def derive_peer_id(public_key: bytes) -> PeerId:
    if not public_key:
        raise ValueError("public key must be non-empty")
    return PeerId(hashlib.sha256(bytes(public_key)).digest())


class ChunkId(NamedTuple):
    """Owner-scoped counter; identity survives content updates."""

    owner: PeerId
    index: int

    def __str__(self) -> str:
        return f"{self.owner.hex()}.{self.index}"

    @classmethod
    def parse(cls, text: str) -> "ChunkId":
        owner, _, index = text.partition(".")
        return cls(PeerId.from_hex(owner), int(index))


class ContractState(enum.IntEnum):
    TENTATIVE = 1
    COMMITTED = 2
    REVOKE_PENDING = 3


@dataclass(frozen=True)
class PeerDescriptor:
    peer: PeerId
    public_key: bytes
    endpoint: tuple[str, int]
    synchro_peers: tuple[PeerId, ...]
    site_label: str = ""
    counter: int = 0  # monotone update counter, last-writer-wins

    def validate(self, max_synchro: int | None = None) -> None:
        if derive_peer_id(self.public_key) != self.peer:
            raise ValueError("descriptor peer id does not match its public key")
        if self.peer not in self.synchro_peers:
            raise ValueError("synchro-peer list must contain the peer itself")
        if len(set(self.synchro_peers)) != len(self.synchro_peers):
            raise ValueError("duplicate synchro-peer")
        if max_synchro is not None and len(self.synchro_peers) > max_synchro:
            raise ValueError(
                f"{len(self.synchro_peers)} synchro-peers exceeds maximum {max_synchro}"
            )


@dataclass(frozen=True)
class PeerProfile:
    peer: PeerId
    p_av: float
    bandwidth_B: float
    free_space: int = 0
    load: int = 0  # bytes currently contracted at this peer (congestion)
    stamp: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_av <= 1.0:
            raise ValueError(f"p_av out of range: {self.p_av}")
        if self.bandwidth_B <= 0:
            raise ValueError("bandwidth must be positive")
        if self.free_space < 0:
            raise ValueError("free space must be non-negative")


@dataclass(frozen=True)
class ChunkMeta:
    chunk: ChunkId
    size: int
    version: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("chunk size must be positive")
        if self.version < 0:
            raise ValueError("version must be non-negative")

    @property
    def owner(self) -> PeerId:
        return self.chunk.owner


@dataclass(frozen=True)
class Placement:
    chunk: ChunkMeta
    replicators: frozenset[PeerId]

    def __post_init__(self):
        if self.chunk.owner in self.replicators:
            raise ValueError("owner cannot replicate its own chunk")

    @property
    def owner(self) -> PeerId:
        return self.chunk.owner


@dataclass(frozen=True)
class PolicyConfig:
    N_r: int = 3
    Des_Tb: float = 86_400.0
    Des_Tr: float = 86_400.0
    close_max: float = 0.0
    remote_min: float = 0.0
    remote_max: float = 0.0
    L: float = 1e6
    M: float = 1.0
    equality_band: float = 0.10
    count_revoke_pending: bool = False

    def __post_init__(self):
        if self.remote_min > self.remote_max:
            raise ValueError("remote_min must not exceed remote_max")
        if self.L <= 0 or self.M <= 0:
            raise ValueError("L and M must be positive")
        if self.N_r < 1:
            raise ValueError("N_r must be at least 1")
        if not 0.0 <= self.equality_band < 1.0:
            raise ValueError("equality_band must lie in [0, 1)")


@dataclass
class Contract:
    """One owner/replicator agreement for one chunk."""

    chunk: ChunkId
    replicator: PeerId
    state: ContractState = ContractState.TENTATIVE
    negotiated_at: float = 0.0
    last_commit_at: float | None = None
    data_present: bool = False
    acked_version: int = -1
    replaces: PeerId | None = None  # old replicator this contract supersedes
    replaced_by: PeerId | None = None  # set on REVOKE_PENDING contracts

    @property
    def owner(self) -> PeerId:
        return self.chunk.owner

    @property
    def active(self) -> bool:
        return self.state is not ContractState.REVOKE_PENDING


@dataclass
class CatalogEntry:
    meta: ChunkMeta
    contracts: dict[PeerId, Contract] = field(default_factory=dict)
    last_commit_at: float | None = None

    def active_replicators(self) -> list[PeerId]:
        return [p for p, c in self.contracts.items() if c.active]

    def placement(self) -> Placement:
        return Placement(self.meta, frozenset(self.active_replicators()))


@dataclass
class ReplicaRecord:
    """Replicator-side view of a contract (the replicated-chunk index)."""

    chunk: ChunkId
    size: int
    state: ContractState = ContractState.TENTATIVE
    held_version: int = -1  # -1: no bytes stored
    target_version: int = -1
    sources: tuple[PeerId, ...] = ()

    @property
    def owner(self) -> PeerId:
        return self.chunk.owner

    @property
    def data_present(self) -> bool:
        return self.held_version >= 0
