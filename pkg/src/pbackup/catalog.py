"""Owner-side DataCatalog, replicator-side index, and their crash-safe log.

File layout (little-endian)::

    b"PBCAT1"
    repeated: u32 length | kind (1 byte) + body (length - 1 bytes) | u32 crc32(kind + body)

Each mutation appends one record holding the full new state of the touched
entry, so replaying any prefix of the log yields a valid earlier state.  A torn
or corrupt tail is discarded on load.
"""
from __future__ import annotations

import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .model import (
    CatalogEntry,
    ChunkId,
    ChunkMeta,
    Contract,
    ContractState,
    PeerId,
    Placement,
    ReplicaRecord,
)

log = logging.getLogger(__name__)

MAGIC = b"PBCAT1"
_NONE_ID = bytes(32)

KIND_ENTRY = b"E"
KIND_ENTRY_DEL = b"e"
KIND_REPLICA = b"R"
KIND_REPLICA_DEL = b"r"
KIND_COUNTER = b"N"

_ENTRY_HEAD = struct.Struct("<32sQQQdH")
_CONTRACT = struct.Struct("<32sBddBq32s32s")
_REPLICA_HEAD = struct.Struct("<32sQQBqqH")
_KEY = struct.Struct("<32sQ")
_COUNTER = struct.Struct("<Q")
_U32 = struct.Struct("<I")


class CatalogFormatError(Exception):
    pass


def _opt_time(value: float | None) -> float:
    return math.nan if value is None else value


def _from_opt_time(value: float) -> float | None:
    return None if math.isnan(value) else value


def _opt_id(value: PeerId | None) -> bytes:
    return _NONE_ID if value is None else bytes(value)


def _from_opt_id(raw: bytes) -> PeerId | None:
    return None if raw == _NONE_ID else PeerId(raw)


def encode_entry(entry: CatalogEntry) -> bytes:
    m = entry.meta
    parts = [
        _ENTRY_HEAD.pack(
            m.chunk.owner,
            m.chunk.index,
            m.size,
            m.version,
            _opt_time(entry.last_commit_at),
            len(entry.contracts),
        )
    ]
    for c in entry.contracts.values():
        parts.append(
            _CONTRACT.pack(
                c.replicator,
                int(c.state),
                c.negotiated_at,
                _opt_time(c.last_commit_at),
                int(c.data_present),
                c.acked_version,
                _opt_id(c.replaces),
                _opt_id(c.replaced_by),
            )
        )
    return b"".join(parts)


def decode_entry(body: bytes) -> CatalogEntry:
    owner, index, size, version, last_commit, n = _ENTRY_HEAD.unpack_from(body, 0)
    chunk = ChunkId(PeerId(owner), index)
    entry = CatalogEntry(ChunkMeta(chunk, size, version), {}, _from_opt_time(last_commit))
    off = _ENTRY_HEAD.size
    for _ in range(n):
        rep, state, neg, lc, present, acked, replaces, replaced_by = _CONTRACT.unpack_from(body, off)
        off += _CONTRACT.size
        peer = PeerId(rep)
        entry.contracts[peer] = Contract(
            chunk=chunk,
            replicator=peer,
            state=ContractState(state),
            negotiated_at=neg,
            last_commit_at=_from_opt_time(lc),
            data_present=bool(present),
            acked_version=acked,
            replaces=_from_opt_id(replaces),
            replaced_by=_from_opt_id(replaced_by),
        )
    if off != len(body):
        raise CatalogFormatError("trailing bytes in entry record")
    return entry


def encode_replica(rec: ReplicaRecord) -> bytes:
    head = _REPLICA_HEAD.pack(
        rec.chunk.owner,
        rec.chunk.index,
        rec.size,
        int(rec.state),
        rec.held_version,
        rec.target_version,
        len(rec.sources),
    )
    return head + b"".join(bytes(s) for s in rec.sources)


def decode_replica(body: bytes) -> ReplicaRecord:
    owner, index, size, state, held, target, n = _REPLICA_HEAD.unpack_from(body, 0)
    off = _REPLICA_HEAD.size
    if len(body) != off + 32 * n:
        raise CatalogFormatError("bad replica record length")
    sources = tuple(PeerId(body[off + 32 * i : off + 32 * (i + 1)]) for i in range(n))
    return ReplicaRecord(ChunkId(PeerId(owner), index), size, ContractState(state), held, target, sources)


def frame_record(kind: bytes, body: bytes) -> bytes:
    payload = kind + body
    return _U32.pack(len(payload)) + payload + _U32.pack(zlib.crc32(payload))


class Journal:
    """Append-only record log backing a catalog and replica index."""

    def __init__(self, path: str | os.PathLike, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._fh = None
        self.records_written = 0

    def open(self, valid_length: int | None = None) -> None:
        exists = self.path.exists() and self.path.stat().st_size > 0
        self._fh = open(self.path, "r+b" if exists else "wb")
        if not exists:
            self._fh.write(MAGIC)
        elif valid_length is not None:
            self._fh.truncate(valid_length)
        self._fh.seek(0, os.SEEK_END)
        self._flush()

    def append(self, kind: bytes, body: bytes) -> None:
        if self._fh is None:
            self.open()
        self._fh.write(frame_record(kind, body))
        self.records_written += 1
        self._flush()

    def _flush(self) -> None:
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class DataCatalog:
    """Owner-side index: one entry per owned chunk."""

    def __init__(self, journal: Journal | None = None):
        self.entries: dict[ChunkId, CatalogEntry] = {}
        self.next_index = 0
        self.journal = journal
        self.recovered = 0  # records replayed by the last load
        self.truncated = False

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, chunk: ChunkId) -> bool:
        return chunk in self.entries

    def __eq__(self, other) -> bool:
        if not isinstance(other, DataCatalog):
            return NotImplemented
        return self.entries == other.entries and self.next_index == other.next_index

    def get(self, chunk: ChunkId) -> CatalogEntry | None:
        return self.entries.get(chunk)

    def lookup(self, chunk: ChunkId) -> Placement | None:
        entry = self.entries.get(chunk)
        return None if entry is None else entry.placement()

    def new_chunk(self, owner: PeerId, size: int) -> CatalogEntry:
        chunk = ChunkId(owner, self.next_index)
        self.next_index += 1
        self._write(KIND_COUNTER, _COUNTER.pack(self.next_index))
        entry = CatalogEntry(ChunkMeta(chunk, size, 0))
        self.put(entry)
        return entry

    def put(self, entry: CatalogEntry) -> None:
        chunk = entry.meta.chunk
        self.entries[chunk] = entry
        if chunk.index >= self.next_index:
            self.next_index = chunk.index + 1
            self._write(KIND_COUNTER, _COUNTER.pack(self.next_index))
        self.touch(chunk)

    def touch(self, chunk: ChunkId) -> None:
        """Journal the current state of ``chunk`` after an in-place mutation."""
        if self.journal is not None:
            self.journal.append(KIND_ENTRY, encode_entry(self.entries[chunk]))

    def remove(self, chunk: ChunkId) -> None:
        if self.entries.pop(chunk, None) is not None:
            self._write(KIND_ENTRY_DEL, _KEY.pack(chunk.owner, chunk.index))

    def _write(self, kind: bytes, body: bytes) -> None:
        if self.journal is not None:
            self.journal.append(kind, body)

    def contract_pairs(self) -> set[tuple[ChunkId, PeerId]]:
        return {(c, p) for c, e in self.entries.items() for p in e.contracts}


class ReplicaIndex:
    """Replicator-side records of chunks this node stores for others."""

    def __init__(self, journal: Journal | None = None):
        self.records: dict[ChunkId, ReplicaRecord] = {}
        self.journal = journal

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, chunk: ChunkId) -> bool:
        return chunk in self.records

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplicaIndex):
            return NotImplemented
        return self.records == other.records

    def get(self, chunk: ChunkId) -> ReplicaRecord | None:
        return self.records.get(chunk)

    def put(self, rec: ReplicaRecord) -> None:
        self.records[rec.chunk] = rec
        self.touch(rec.chunk)

    def touch(self, chunk: ChunkId) -> None:
        if self.journal is not None:
            self.journal.append(KIND_REPLICA, encode_replica(self.records[chunk]))

    def remove(self, chunk: ChunkId) -> None:
        if self.records.pop(chunk, None) is not None and self.journal is not None:
            self.journal.append(KIND_REPLICA_DEL, _KEY.pack(chunk.owner, chunk.index))

    def for_owner(self, owner: PeerId) -> list[ReplicaRecord]:
        return [r for r in self.records.values() if r.chunk.owner == owner]

    def contracted_bytes(self) -> int:
        return sum(r.size for r in self.records.values() if r.state is not ContractState.REVOKE_PENDING)

    def stored_bytes(self) -> int:
        return sum(r.size for r in self.records.values() if r.data_present)


@dataclass
class LoadedState:
    catalog: DataCatalog
    replicas: ReplicaIndex
    recovered: int = 0
    truncated: bool = False
    valid_length: int = 0
    notes: list[str] = field(default_factory=list)


def read_state(path: str | os.PathLike) -> LoadedState:
    """Replay a catalog log, keeping every record before the first bad one."""
    data = Path(path).read_bytes()
    catalog, replicas = DataCatalog(), ReplicaIndex()
    state = LoadedState(catalog, replicas)
    if not data:
        return state
    if len(data) < len(MAGIC):
        state.truncated = True
        return state
    if data[: len(MAGIC)] != MAGIC:
        raise CatalogFormatError(f"{path}: bad magic header")
    off = len(MAGIC)
    state.valid_length = off
    while off < len(data):
        if off + 4 > len(data):
            state.truncated = True
            break
        (length,) = _U32.unpack_from(data, off)
        end = off + 4 + length + 4
        if length < 1 or end > len(data):
            state.truncated = True
            break
        payload = data[off + 4 : off + 4 + length]
        (crc,) = _U32.unpack_from(data, off + 4 + length)
        if zlib.crc32(payload) != crc:
            state.truncated = True
            break
        try:
            _apply(state, payload[:1], payload[1:])
        except (struct.error, CatalogFormatError, ValueError) as exc:
            state.notes.append(str(exc))
            state.truncated = True
            break
        state.recovered += 1
        off = end
        state.valid_length = off
    if state.truncated:
        log.warning("catalog %s: discarded corrupt tail after %d records", path, state.recovered)
    catalog.recovered = state.recovered
    catalog.truncated = state.truncated
    return state


def _apply(state: LoadedState, kind: bytes, body: bytes) -> None:
    if kind == KIND_ENTRY:
        entry = decode_entry(body)
        state.catalog.entries[entry.meta.chunk] = entry
    elif kind == KIND_ENTRY_DEL:
        owner, index = _KEY.unpack(body)
        state.catalog.entries.pop(ChunkId(PeerId(owner), index), None)
    elif kind == KIND_REPLICA:
        rec = decode_replica(body)
        state.replicas.records[rec.chunk] = rec
    elif kind == KIND_REPLICA_DEL:
        owner, index = _KEY.unpack(body)
        state.replicas.records.pop(ChunkId(PeerId(owner), index), None)
    elif kind == KIND_COUNTER:
        (value,) = _COUNTER.unpack(body)
        state.catalog.next_index = max(state.catalog.next_index, value)
    else:
        raise CatalogFormatError(f"unknown record kind {kind!r}")


def write_snapshot(path: str | os.PathLike, catalog: DataCatalog, replicas: ReplicaIndex | None = None) -> None:
    """Atomically replace ``path`` with a compact snapshot."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(frame_record(KIND_COUNTER, _COUNTER.pack(catalog.next_index)))
        for entry in catalog.entries.values():
            fh.write(frame_record(KIND_ENTRY, encode_entry(entry)))
        if replicas is not None:
            for rec in replicas.records.values():
                fh.write(frame_record(KIND_REPLICA, encode_replica(rec)))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def catalog_persist(catalog: DataCatalog, path: str | os.PathLike) -> None:
    write_snapshot(path, catalog)


def catalog_load(path: str | os.PathLike) -> DataCatalog:
    return read_state(path).catalog


def open_persistent(path: str | os.PathLike, fsync: bool = False) -> tuple[DataCatalog, ReplicaIndex]:
    """Load (or create) the log at ``path`` and attach a journal for future writes.

    The log is compacted on open so it does not grow without bound across restarts.
    """
    path = Path(path)
    if path.exists():
        state = read_state(path)
        write_snapshot(path, state.catalog, state.replicas)
        catalog, replicas = state.catalog, state.replicas
    else:
        catalog, replicas = DataCatalog(), ReplicaIndex()
    journal = Journal(path, fsync=fsync)
    journal.open()
    catalog.journal = journal
    replicas.journal = journal
    return catalog, replicas
