"""Local chunk storage with atomic replace, CRC sidecars and a byte quota.

Layout under ``root``::

    chunks/<owner-hex>.<index>.<version>.blob   raw chunk bytes
    chunks/<owner-hex>.<index>.<version>.crc    8 lowercase hex digits, CRC32 of the blob
    tmp/                                        staging area, cleared at open

A chunk becomes visible when its ``.crc`` file is renamed into place; the blob
is renamed first, so a crash between the two leaves an orphan blob that
``open`` discards.  Older versions are removed only after the new one is
visible.
"""
from __future__ import annotations

import enum
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .model import ChunkId, PeerId


class Role(enum.Enum):
    OWNED = "owned"
    REPLICA = "replica"


class QuotaExceeded(Exception):
    pass


class IntegrityError(Exception):
    """Stored bytes no longer match their digest."""


class Unauthorized(Exception):
    pass


@dataclass(frozen=True)
class StoredChunk:
    chunk: ChunkId
    version: int
    size: int
    role: Role
    crc: int


def _stem(chunk: ChunkId, version: int) -> str:
    return f"{chunk}.{version}"


def _parse_stem(stem: str) -> tuple[ChunkId, int]:
    owner, index, version = stem.split(".")
    return ChunkId(PeerId.from_hex(owner), int(index)), int(version)


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


@dataclass
class ChunkStore:
    root: Path
    quota: int
    me: PeerId | None = None
    fsync: bool = True
    index: dict[ChunkId, StoredChunk] = field(default_factory=dict)

    def __post_init__(self):
        if self.quota <= 0:
            raise ValueError("quota must be positive")
        self.root = Path(self.root)
        self.chunks_dir = self.root / "chunks"
        self.tmp_dir = self.root / "tmp"
        self.chunks_dir.mkdir(parents=True, exist_ok=True)
        self.tmp_dir.mkdir(parents=True, exist_ok=True)
        self._scan()

    def _scan(self) -> None:
        for p in self.tmp_dir.iterdir():
            p.unlink()
        found: dict[ChunkId, StoredChunk] = {}
        crcs = {p.stem: p for p in self.chunks_dir.glob("*.crc")}
        for blob in sorted(self.chunks_dir.glob("*.blob")):
            if blob.stem not in crcs:
                blob.unlink()  # never committed
                continue
            try:
                chunk, version = _parse_stem(blob.stem)
                crc = int(crcs[blob.stem].read_text().strip(), 16)
            except ValueError:
                continue
            role = Role.OWNED if chunk.owner == self.me else Role.REPLICA
            prev = found.get(chunk)
            rec = StoredChunk(chunk, version, blob.stat().st_size, role, crc)
            if prev is None or version > prev.version:
                if prev is not None:
                    self._unlink(prev.chunk, prev.version)
                found[chunk] = rec
            else:
                self._unlink(chunk, version)
        for stem, p in crcs.items():
            if not (self.chunks_dir / f"{stem}.blob").exists():
                p.unlink(missing_ok=True)
        self.index = found

    def _paths(self, chunk: ChunkId, version: int) -> tuple[Path, Path]:
        stem = _stem(chunk, version)
        return self.chunks_dir / f"{stem}.blob", self.chunks_dir / f"{stem}.crc"

    def _unlink(self, chunk: ChunkId, version: int) -> None:
        blob, crc = self._paths(chunk, version)
        crc.unlink(missing_ok=True)
        blob.unlink(missing_ok=True)

    @property
    def used(self) -> int:
        return sum(s.size for s in self.index.values())

    def free(self) -> int:
        return self.quota - self.used

    def _write_tmp(self, name: str, data: bytes) -> Path:
        tmp = self.tmp_dir / name
        with open(tmp, "wb") as f:
            f.write(data)
            if self.fsync:
                f.flush()
                os.fsync(f.fileno())
        return tmp

    def put_chunk(self, chunk: ChunkId, version: int, data: bytes, _crash_at: str | None = None) -> StoredChunk:
        prev = self.index.get(chunk)
        delta = len(data) - (prev.size if prev else 0)
        if self.used + delta > self.quota:
            raise QuotaExceeded(f"{chunk}: {len(data)} bytes exceed quota")
        if prev is not None and version < prev.version:
            raise ValueError(f"{chunk}: version {version} older than stored {prev.version}")
        crc = zlib.crc32(data)
        blob, side = self._paths(chunk, version)
        tmp_blob = self._write_tmp(blob.name, data)
        tmp_side = self._write_tmp(side.name, f"{crc:08x}\n".encode())
        if _crash_at == "before_blob":
            raise OSError("injected crash")
        os.replace(tmp_blob, blob)
        if _crash_at == "before_commit":
            raise OSError("injected crash")
        os.replace(tmp_side, side)
        if self.fsync:
            _fsync_dir(self.chunks_dir)
        role = Role.OWNED if chunk.owner == self.me else Role.REPLICA
        rec = StoredChunk(chunk, version, len(data), role, crc)
        self.index[chunk] = rec
        if prev is not None and prev.version != version:
            self._unlink(chunk, prev.version)
        return rec

    def get_chunk(self, chunk: ChunkId) -> tuple[int, bytes] | None:
        rec = self.index.get(chunk)
        if rec is None:
            return None
        blob, _ = self._paths(chunk, rec.version)
        try:
            data = blob.read_bytes()
        except FileNotFoundError:
            self.index.pop(chunk, None)
            raise IntegrityError(f"{chunk}: blob missing")
        if zlib.crc32(data) != rec.crc:
            raise IntegrityError(f"{chunk}: checksum mismatch")
        return rec.version, data

    def stat(self, chunk: ChunkId) -> StoredChunk | None:
        return self.index.get(chunk)

    def delete_chunk(self, chunk: ChunkId, requester: PeerId) -> int:
        if requester != chunk.owner and requester != self.me:
            raise Unauthorized(f"{requester.short} may not delete {chunk}")
        rec = self.index.pop(chunk, None)
        if rec is None:
            return 0
        self._unlink(chunk, rec.version)
        return rec.size

    def chunks(self) -> list[StoredChunk]:
        return [self.index[c] for c in sorted(self.index)]


@dataclass
class MemoryChunkStore:
    """Size-only stand-in used by the simulator: tracks versions and sizes, not bytes."""

    quota: int
    me: PeerId | None = None
    index: dict[ChunkId, StoredChunk] = field(default_factory=dict)

    @property
    def used(self) -> int:
        return sum(s.size for s in self.index.values())

    def free(self) -> int:
        return self.quota - self.used

    def put_meta(self, chunk: ChunkId, version: int, size: int) -> StoredChunk:
        prev = self.index.get(chunk)
        if self.used + size - (prev.size if prev else 0) > self.quota:
            raise QuotaExceeded(str(chunk))
        role = Role.OWNED if chunk.owner == self.me else Role.REPLICA
        rec = StoredChunk(chunk, version, size, role, 0)
        self.index[chunk] = rec
        return rec

    def stat(self, chunk: ChunkId) -> StoredChunk | None:
        return self.index.get(chunk)

    def delete_chunk(self, chunk: ChunkId, requester: PeerId) -> int:
        if requester != chunk.owner and requester != self.me:
            raise Unauthorized(f"{requester.short} may not delete {chunk}")
        rec = self.index.pop(chunk, None)
        return 0 if rec is None else rec.size
