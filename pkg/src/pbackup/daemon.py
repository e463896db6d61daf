"""Live node: runs a protocol ``Node`` over authenticated TCP with on-disk state.

Layout of ``data_dir``::

    catalog.log      owner catalog and replica index (journal)
    owned/           this node's own chunks
    replicas/        chunks held for other owners
    messenger.json   store-and-forward state
    manifest.json    backup file -> chunk mapping
    uptime.json      availability estimate
"""
from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import os
import random
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .catalog import open_persistent
from .chunkstore import ChunkStore, IntegrityError, QuotaExceeded
from .contracts import EngineConfig
from .messaging import SynchroState, SyncMessenger
from .model import ChunkId, ChunkMeta, PeerDescriptor, PeerId, PolicyConfig
from .node import Node, NodeParams
from .optimizer import OptimizerConfig
from .protocol import CancelPull, DropData, MsgType, Note, Send, StartPull
from .tcp import Identity, SecureChannel, TokenBucket, accept_channel, open_channel, verify
from .wire import FrameError, decode_frame, encode_frame

log = logging.getLogger(__name__)

UNLIMITED = 1 << 62


class ConfigError(ValueError):
    pass


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ConfigError(f"address must look like host:port, got {text!r}")
    return host, int(port)


@dataclass
class NodeConfig:
    key: Path
    listen: tuple[str, int]
    data_dir: Path
    quota: int
    bootstrap: list[tuple[str, int]] = field(default_factory=list)
    bandwidth: float = 1e6
    site: str = ""
    backup_paths: list[Path] = field(default_factory=list)
    chunk_size: int = 50_000_000
    synchro_count: int = 2
    connect_timeout: float = 5.0
    scan_period: float = 3600.0
    anti_entropy_period: float = 60.0
    fsync: bool = True
    site_distance: float = 1.0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    node: NodeParams = field(default_factory=NodeParams)


_SECTIONS = {"policy": PolicyConfig, "optimizer": OptimizerConfig, "engine": EngineConfig}
_TIMERS = {"relay_tick", "maintenance_period", "offer_timeout", "swap_timeout", "rebuild_wait", "profile_ttl"}


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def load_config(path: str | os.PathLike) -> NodeConfig:
    """Parse and validate a node config; raises ``ConfigError``."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.parent
    for req in ("key", "listen", "data_dir", "quota"):
        if req not in raw:
            raise ConfigError(f"missing required field {req!r}")
    raw = dict(raw)
    sections = {k: _section(cls, raw.pop(k, None), k) for k, cls in _SECTIONS.items()}
    timers = raw.pop("timers", None) or {}
    if not isinstance(timers, dict) or set(timers) - _TIMERS:
        raise ConfigError(f"timers must be a mapping with keys among {sorted(_TIMERS)}")
    try:
        cfg = NodeConfig(
            key=(base / raw.pop("key")).resolve(),
            listen=parse_addr(raw.pop("listen")),
            data_dir=(base / raw.pop("data_dir")).resolve(),
            quota=int(raw.pop("quota")),
            bootstrap=[parse_addr(a) for a in raw.pop("bootstrap", None) or []],
            backup_paths=[(base / p).resolve() for p in raw.pop("backup_paths", None) or []],
            **sections,
            **{k: raw.pop(k) for k in list(raw) if k in {f.name for f in dataclasses.fields(NodeConfig)}},
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")
    if cfg.quota <= 0:
        raise ConfigError("quota must be positive")
    if cfg.bandwidth <= 0 or cfg.chunk_size <= 0:
        raise ConfigError("bandwidth and chunk_size must be positive")
    if cfg.synchro_count < 0:
        raise ConfigError("synchro_count must be non-negative")
    if not cfg.key.is_file():
        raise ConfigError(f"key file not found: {cfg.key}")
    cfg.node = NodeParams(policy=cfg.policy, optimizer=cfg.optimizer, engine=cfg.engine,
                          **{k: float(v) for k, v in timers.items()})
    return cfg


# ----- signed descriptors -----

def _desc_body(d: PeerDescriptor) -> dict:
    return {"peer": d.peer.hex(), "pk": d.public_key.hex(), "host": d.endpoint[0], "port": d.endpoint[1],
            "synchro": [p.hex() for p in d.synchro_peers], "site": d.site_label, "counter": d.counter}


def sign_descriptor(d: PeerDescriptor, identity: Identity) -> dict:
    body = _desc_body(d)
    body["sig"] = identity.sign(json.dumps(body, sort_keys=True).encode()).hex()
    return body


def verify_descriptor(raw: dict) -> PeerDescriptor:
    """Check the signature and structure of a wire descriptor; raises ``ValueError``."""
    body = {k: v for k, v in raw.items() if k != "sig"}
    pk = bytes.fromhex(raw["pk"])
    if not verify(pk, bytes.fromhex(raw["sig"]), json.dumps(body, sort_keys=True).encode()):
        raise ValueError("bad descriptor signature")
    d = PeerDescriptor(PeerId.from_hex(raw["peer"]), pk, (str(raw["host"]), int(raw["port"])),
                       tuple(PeerId.from_hex(p) for p in raw["synchro"]), str(raw.get("site", "")),
                       int(raw["counter"]))
    d.validate()
    return d


# ----- the daemon -----

class Daemon:
    def __init__(self, cfg: NodeConfig, identity: Identity, rebuild: bool = False):
        self.cfg = cfg
        self.identity = identity
        self.me = identity.peer
        self.rebuild_requested = rebuild
        self.data_dir = cfg.data_dir
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.owned = ChunkStore(self.data_dir / "owned", UNLIMITED, me=self.me, fsync=cfg.fsync)
        self.store = ChunkStore(self.data_dir / "replicas", cfg.quota, me=self.me, fsync=cfg.fsync)
        fresh = not (self.data_dir / "catalog.log").exists()
        catalog, replicas = open_persistent(self.data_dir / "catalog.log", fsync=cfg.fsync)
        messenger = self._load_messenger()
        self.descs: dict[PeerId, PeerDescriptor] = {}
        self.signed: dict[PeerId, dict] = {}
        self.down_until: dict[PeerId, float] = {}
        self.node = Node(self.me, cfg.node, bandwidth=cfg.bandwidth, quota=cfg.quota,
                         seed=int.from_bytes(os.urandom(8), "big"), catalog=catalog, replicas=replicas,
                         messenger=messenger, dist=self._dist, reachable=self._reachable,
                         resolve=self.descs.get, members=lambda: sorted(self.descs))
        self._reconcile_store()
        self.node.engine.recover_after_restart()
        # An owner with an empty catalog must not answer repair digests before it has
        # asked the network what it owns: replicators would drop its data.  A fresh
        # data directory probes once; an explicit rebuild retries until someone answers.
        self.probe = rebuild or fresh
        if self.probe:
            self.node.engine.catalog_lost = True
        self.uptime = self._load_uptime()
        self.node.p_av = self._p_av()
        self.bucket = TokenBucket(cfg.bandwidth)
        self.conns: dict[PeerId, SecureChannel] = {}
        self.outq: dict[PeerId, asyncio.Queue] = {}
        self.pulls: dict[ChunkId, asyncio.Task] = {}
        self.waiting: dict[tuple[PeerId, str], asyncio.Future] = {}
        self.tasks: set[asyncio.Task] = set()
        self.closing = False
        self.server: asyncio.AbstractServer | None = None
        self.stopping = asyncio.Event()
        self.rng = random.Random()
        self.publish_self()

    # ----- persistence helpers -----

    def _load_messenger(self) -> SyncMessenger:
        path = self.data_dir / "messenger.json"
        if path.exists():
            try:
                raw = json.loads(path.read_text())
                return SyncMessenger(self.me, SynchroState.from_dict(raw["state"]),
                                     {PeerId.from_hex(k): v for k, v in raw["next_seq"].items()})
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("ignoring unreadable messenger state: %s", exc)
        return SyncMessenger(self.me)

    def save_messenger(self) -> None:
        m = self.node.messenger
        raw = {"state": m.state.to_dict(), "next_seq": {k.hex(): v for k, v in m.next_seq.items()}}
        tmp = self.data_dir / "messenger.json.tmp"
        tmp.write_text(json.dumps(raw))
        tmp.replace(self.data_dir / "messenger.json")

    def _load_uptime(self) -> dict:
        path = self.data_dir / "uptime.json"
        now = time.time()
        try:
            up = json.loads(path.read_text())
        except (OSError, ValueError):
            up = {"first": now, "up": 0.0}
        up["mark"] = now
        return up

    def _p_av(self) -> float:
        span = time.time() - self.uptime["first"]
        # too little history to tell: assume always on
        return 1.0 if span < 3600 else min(1.0, max(0.0, self.uptime["up"] / span))

    def save_uptime(self) -> None:
        now = time.time()
        self.uptime["up"] += now - self.uptime.pop("mark")
        self.uptime["mark"] = now
        (self.data_dir / "uptime.json").write_text(json.dumps({"first": self.uptime["first"], "up": self.uptime["up"]}))

    def _reconcile_store(self) -> None:
        """Make the replica index agree with what is actually on disk."""
        reps = self.node.replicas
        for chunk, rec in reps.records.items():
            st = self.store.stat(chunk)
            held = -1 if st is None else st.version
            if held != rec.held_version:
                log.info("replica %s: index says v%d, disk has v%d", chunk, rec.held_version, held)
                rec.held_version = held
                rec.target_version = min(rec.target_version, held)
                reps.touch(chunk)
        for st in self.store.chunks():
            if st.chunk not in reps.records:
                self.store.delete_chunk(st.chunk, self.me)

    def manifest(self) -> dict:
        try:
            return json.loads((self.data_dir / "manifest.json").read_text())
        except (OSError, ValueError):
            return {}

    # ----- membership -----

    def _dist(self, peer: PeerId) -> float:
        d = self.descs.get(peer)
        return 0.0 if d is not None and d.site_label == self.cfg.site else self.cfg.site_distance

    def _reachable(self, peer: PeerId) -> bool:
        return peer in self.descs and self.down_until.get(peer, 0.0) <= time.time()

    def _choose_synchro(self) -> tuple[PeerId, ...]:
        ring = sorted(p for p in self.descs if p != self.me)
        after = [p for p in ring if p > self.me] + [p for p in ring if p < self.me]
        return (self.me, *after[:self.cfg.synchro_count])

    def publish_self(self) -> bool:
        cur = self.descs.get(self.me)
        synchro = self._choose_synchro()
        host, port = self.cfg.listen
        if cur is not None and cur.synchro_peers == synchro and cur.endpoint == (host, port):
            return False
        counter = max(cur.counter + 1 if cur else 0, int(time.time() * 1000))
        d = PeerDescriptor(self.me, self.identity.public, (host, port), synchro, self.cfg.site, counter)
        self.descs[self.me] = d
        self.signed[self.me] = sign_descriptor(d, self.identity)
        return True

    def store_descriptor(self, raw: dict) -> bool:
        try:
            d = verify_descriptor(raw)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("rejected descriptor: %s", exc)
            return False
        if d.peer == self.me:
            return False
        cur = self.descs.get(d.peer)
        if cur is not None and cur.counter >= d.counter:
            return False
        self.descs[d.peer] = d
        self.signed[d.peer] = raw
        self.down_until.pop(d.peer, None)
        self.publish_self()
        return True

    def digest(self) -> dict[str, int]:
        return {p.hex(): d.counter for p, d in self.descs.items()}

    def newer_than(self, digest: dict) -> list[dict]:
        return [self.signed[p] for p, d in self.descs.items() if d.counter > int(digest.get(p.hex(), -1))]

    # ----- effects -----

    def spawn(self, coro) -> asyncio.Task | None:
        if self.closing:
            coro.close()
            return None
        t = asyncio.get_running_loop().create_task(coro)
        self.tasks.add(t)
        t.add_done_callback(self.tasks.discard)
        return t

    def execute(self, effects: list) -> None:
        for e in effects:
            if isinstance(e, Send):
                self.enqueue(e.dst, e.mtype, e.body, track=e.track)
            elif isinstance(e, StartPull):
                old = self.pulls.pop(e.chunk, None)
                if old is not None:
                    old.cancel()
                t = self.spawn(self._pull(e))
                if t is not None:
                    self.pulls[e.chunk] = t
            elif isinstance(e, CancelPull):
                t = self.pulls.pop(e.chunk, None)
                if t is not None:
                    t.cancel()
            elif isinstance(e, DropData):
                self.store.delete_chunk(e.chunk, self.me)
            elif isinstance(e, Note):
                log.debug("%s %s", e.kind, e.data)
                if e.kind == "rebuilt" or e.kind == "rebuild_failed":
                    log.info("catalog %s: %s", e.kind, e.data)
                    if e.kind == "rebuild_failed" and self.rebuild_requested:
                        self.node.engine.catalog_lost = True
                        self.spawn(self._rebuild_when_ready(delay=self.cfg.node.rebuild_wait))
                    else:
                        self.probe = False

    def enqueue(self, dst: PeerId, mtype: MsgType, body: dict, data: bytes = b"", track: bool = False) -> None:
        q = self.outq.get(dst)
        if q is None:
            q = self.outq[dst] = asyncio.Queue()
            self.spawn(self._sender(dst, q))
        q.put_nowait((mtype, body, data, track))

    async def _sender(self, dst: PeerId, q: asyncio.Queue) -> None:
        # one worker per destination keeps per-pair order
        while True:
            mtype, body, data, track = await q.get()
            ok = await self._send_now(dst, mtype, body, data)
            if track:
                self.execute(self.node.on_send_result(dst, mtype, body, ok, time.time()))

    async def _send_now(self, dst: PeerId, mtype: MsgType, body: dict, data: bytes = b"") -> bool:
        frame = encode_frame(mtype, self.me, body, data)
        for _ in range(2):  # a cached connection may have gone stale; redial once
            try:
                ch = await self._channel(dst)
                await ch.send(frame, self.bucket if mtype is MsgType.CHUNK_DATA else None)
                return True
            except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
                err = exc
                ch = self.conns.pop(dst, None)
                if ch is not None:
                    ch.close()
        log.debug("send %s to %s failed: %s", mtype.name, dst.short, err)
        if dst in self.descs:
            self.down_until[dst] = time.time() + self.cfg.connect_timeout
        return False

    async def _channel(self, peer: PeerId) -> SecureChannel:
        ch = self.conns.get(peer)
        if ch is not None and not ch.writer.is_closing():
            return ch
        d = self.descs.get(peer)
        if d is None:
            raise ConnectionError(f"no descriptor for {peer.short}")
        ch = await open_channel(*d.endpoint, self.identity, expected=peer, timeout=self.cfg.connect_timeout)
        self._adopt(ch)
        return ch

    def _adopt(self, ch: SecureChannel) -> None:
        old = self.conns.get(ch.peer)
        if old is not None and old is not ch and old.writer.is_closing():
            self.conns.pop(ch.peer)
        self.conns.setdefault(ch.peer, ch)
        self.spawn(self._reader(ch))

    # ----- inbound -----

    async def _on_accept(self, reader, writer) -> None:
        try:
            ch = await accept_channel(reader, writer, self.identity, self.cfg.connect_timeout)
        except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
            log.debug("handshake failed: %s", exc)
            writer.close()
            return
        self._adopt(ch)

    async def _reader(self, ch: SecureChannel) -> None:
        try:
            while True:
                frame = await ch.recv()
                try:
                    mtype, sender, body, data = decode_frame(frame)
                except FrameError as exc:
                    log.warning("bad frame from %s: %s", ch.peer.short, exc)
                    continue
                if sender != ch.peer:
                    log.warning("frame claims sender %s on channel of %s", sender.short, ch.peer.short)
                    continue
                self.handle(sender, mtype, body, data)
        except (OSError, ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            ch.close()
            if self.conns.get(ch.peer) is ch:
                del self.conns[ch.peer]

    def handle(self, sender: PeerId, mtype: MsgType, body: dict, data: bytes = b"") -> None:
        now = time.time()
        self.down_until.pop(sender, None)
        try:
            if mtype is MsgType.REG_PUT:
                self.store_descriptor(body["desc"])
            elif mtype is MsgType.REG_GET:
                peer = PeerId.from_hex(body["peer"])
                self.enqueue(sender, MsgType.REG_REPLY, {"descs": [self.signed[peer]] if peer in self.signed else []})
            elif mtype is MsgType.REG_ANTIENTROPY:
                self.enqueue(sender, MsgType.REG_REPLY, {"descs": self.newer_than(body.get("digest", {})),
                                                         "digest": self.digest()})
            elif mtype is MsgType.REG_REPLY:
                for raw in body.get("descs", []):
                    self.store_descriptor(raw)
                if "digest" in body:
                    for raw in self.newer_than(body["digest"]):
                        self.enqueue(sender, MsgType.REG_PUT, {"desc": raw})
            elif mtype is MsgType.PULL_REQUEST:
                self._serve_pull(sender, body)
            elif mtype is MsgType.STATUS_QUERY:
                st = self.node.status(now)
                st["members"] = sorted(p.hex() for p in self.descs)
                self.enqueue(sender, MsgType.STATUS_REPLY, st)
            elif mtype is MsgType.CHUNK_DATA:
                fut = self.waiting.pop((sender, body["chunk"]), None)
                if fut is not None and not fut.done():
                    fut.set_result((body, data))
            else:
                self.execute(self.node.on_message(sender, mtype, body, now))
        except (KeyError, ValueError, TypeError) as exc:
            log.warning("malformed %s from %s: %s", mtype.name, sender.short, exc)

    # ----- data plane -----

    def _readable(self, chunk: ChunkId) -> tuple[int, bytes] | None:
        try:
            return (self.owned if chunk.owner == self.me else self.store).get_chunk(chunk)
        except IntegrityError as exc:
            log.error("%s", exc)
            return None

    def _may_read(self, sender: PeerId, chunk: ChunkId) -> bool:
        if chunk.owner == self.me:
            entry = self.node.catalog.get(chunk)
            return entry is not None and sender in entry.contracts
        return sender == chunk.owner or sender in self.descs

    def _serve_pull(self, sender: PeerId, body: dict) -> None:
        chunk = ChunkId.parse(body["chunk"])
        want = int(body.get("version", 0))
        got = self._readable(chunk) if self._may_read(sender, chunk) else None
        if got is None or got[0] < want:
            self.enqueue(sender, MsgType.CHUNK_DATA, {"chunk": str(chunk), "ok": False})
            return
        self.enqueue(sender, MsgType.CHUNK_DATA, {"chunk": str(chunk), "ok": True, "version": got[0],
                                                  "crc": zlib.crc32(got[1])}, got[1])

    async def _fetch(self, src: PeerId, e: StartPull) -> tuple[int, bytes] | None:
        fut = asyncio.get_running_loop().create_future()
        key = (src, str(e.chunk))
        self.waiting[key] = fut
        try:
            if not await self._send_now(src, MsgType.PULL_REQUEST, {"chunk": str(e.chunk), "version": e.version}):
                return None
            limit = self.cfg.connect_timeout * 2 + 4 * e.size / self.cfg.bandwidth
            body, data = await asyncio.wait_for(fut, limit)
        except asyncio.TimeoutError:
            return None
        finally:
            self.waiting.pop(key, None)
        if not body.get("ok") or int(body["version"]) < e.version or zlib.crc32(data) != body.get("crc"):
            return None
        return int(body["version"]), data

    async def _pull(self, e: StartPull) -> None:
        try:
            sources = [s for s in e.sources if s != self.me]
            self.rng.shuffle(sources)
            sources.sort(key=lambda s: not self._reachable(s))
            for src in sources:
                got = await self._fetch(src, e)
                if got is None:
                    continue
                version, data = got
                try:
                    (self.owned if e.owned else self.store).put_chunk(e.chunk, version, data)
                except QuotaExceeded as exc:
                    log.warning("%s", exc)
                    break
                self.execute(self.node.on_pull_complete(e.chunk, version, e.owned, time.time()))
                return
            self.execute(self.node.on_pull_failed(e.chunk, time.time()))
        finally:
            if self.pulls.get(e.chunk) is asyncio.current_task():
                del self.pulls[e.chunk]

    # ----- owner data -----

    def scan_backup(self) -> int:
        """Split backup files into chunks; store new or changed pieces.  Returns chunks touched."""
        eng = self.node.engine
        if eng.catalog_lost or self.node.rebuild is not None or self.probe:
            return 0
        if any(c.owner == self.me for c in self.pulls):
            return 0  # restores still running
        manifest = self.manifest()
        known = {c for pieces in manifest.values() for c in pieces}
        # owned chunks no file claims, e.g. restored after a wipe; adopt them by content
        spare = {(st.crc, st.size): st.chunk for st in self.owned.chunks()
                 if str(st.chunk) not in known and st.chunk in self.node.catalog}
        touched = 0
        for path in self.cfg.backup_paths:
            try:
                blob = path.read_bytes()
            except OSError as exc:
                log.warning("cannot read %s: %s", path, exc)
                continue
            pieces = manifest.setdefault(str(path), [])
            for i, off in enumerate(range(0, max(len(blob), 1), self.cfg.chunk_size)):
                data = blob[off:off + self.cfg.chunk_size]
                if not data:
                    break
                if i < len(pieces):
                    chunk = ChunkId.parse(pieces[i])
                    st = self.owned.stat(chunk)
                    entry = self.node.catalog.get(chunk)
                    if entry is None or (st is not None and st.crc == zlib.crc32(data) and st.size == len(data)):
                        continue
                    v = eng.bump_version(chunk)
                    if entry.meta.size != len(data):
                        entry.meta = ChunkMeta(chunk, len(data), v)
                        self.node.catalog.touch(chunk)
                else:
                    adopt = spare.pop((zlib.crc32(data), len(data)), None)
                    if adopt is not None:
                        pieces.append(str(adopt))
                        continue
                    entry = eng.add_chunk(len(data))
                    chunk, v = entry.meta.chunk, 0
                    pieces.append(str(chunk))
                self.owned.put_chunk(chunk, v, data)
                touched += 1
        tmp = self.data_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest))
        tmp.replace(self.data_dir / "manifest.json")
        if touched:
            self.execute(self.node.send_version_notices(time.time()))
        return touched

    # ----- timers and lifecycle -----

    async def _every(self, period: float, fn) -> None:
        await asyncio.sleep(self.rng.uniform(0, min(period, 1.0)))
        while True:
            try:
                fn()
            except Exception:
                log.exception("timer failed")
            await asyncio.sleep(period)

    def _timer(self, kind: str):
        def fire():
            if kind == "maintain":
                self.save_uptime()
                self.node.p_av = self._p_av()
                self.save_messenger()
            self.execute(self.node.on_timer(kind, time.time()))
        return fire

    def anti_entropy(self) -> None:
        peers = [p for p in self.descs if p != self.me and self._reachable(p)]
        for p in self.rng.sample(peers, min(2, len(peers))):
            self.enqueue(p, MsgType.REG_ANTIENTROPY, {"digest": self.digest()})
        for addr in self.cfg.bootstrap:
            if addr != self.cfg.listen:
                self.spawn(self._bootstrap(addr))

    async def _bootstrap(self, addr: tuple[str, int]) -> None:
        if any(d.endpoint == addr for p, d in self.descs.items() if p in self.conns):
            return
        try:
            ch = await open_channel(*addr, self.identity, timeout=self.cfg.connect_timeout)
        except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
            log.debug("bootstrap %s:%d unreachable: %s", *addr, exc)
            return
        self._adopt(ch)
        await ch.send(encode_frame(MsgType.REG_PUT, self.me, {"desc": self.signed[self.me]}))
        await ch.send(encode_frame(MsgType.REG_ANTIENTROPY, self.me, {"digest": self.digest()}))

    async def _rebuild_when_ready(self, delay: float = 0.0) -> None:
        await asyncio.sleep(delay)
        deadline = time.time() + self.cfg.node.rebuild_wait
        while len(self.descs) < 2 and time.time() < deadline:
            await asyncio.sleep(0.2)
        await asyncio.sleep(min(2.0, self.cfg.anti_entropy_period))  # let membership settle
        log.info("rebuilding catalog from %d peers", len(self.descs) - 1)
        self.execute(self.node.declare_catalog_lost(time.time()))

    async def start(self) -> None:
        host, port = self.cfg.listen
        self.server = await asyncio.start_server(self._on_accept, host, port)
        loop_timers = dict(self.node.timer_periods())
        for kind, period in loop_timers.items():
            self.spawn(self._every(period, self._timer(kind)))
        self.spawn(self._every(self.cfg.anti_entropy_period, self.anti_entropy))
        if self.probe:
            self.spawn(self._rebuild_when_ready())
        self.spawn(self._every(self.cfg.scan_period, self.scan_backup))
        log.info("node %s listening on %s:%d", self.me.short, host, port)

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
        self.closing = True
        # wait_for on 3.10 can swallow a cancel that races with completion, so cancel in rounds
        for _ in range(10):
            if not self.tasks:
                break
            for t in list(self.tasks):
                t.cancel()
            await asyncio.wait(list(self.tasks), timeout=0.5)
        if self.tasks:
            log.warning("%d tasks ignored cancellation", len(self.tasks))
        for ch in list(self.conns.values()):
            ch.close()
        self.close_state()

    def close_state(self) -> None:
        self.save_messenger()
        self.save_uptime()
        journal = self.node.catalog.journal
        if journal is not None:
            journal.close()

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await self.stopping.wait()
        finally:
            await self.stop()


async def query_status(addr: tuple[str, int], timeout: float = 5.0) -> dict:
    """Ask a running node for its status with a throwaway identity."""
    me = Identity.generate()
    ch = await open_channel(*addr, me, timeout=timeout)
    try:
        await ch.send(encode_frame(MsgType.STATUS_QUERY, me.peer, {}))
        while True:
            mtype, _, body, _ = decode_frame(await asyncio.wait_for(ch.recv(), timeout))
            if mtype is MsgType.STATUS_REPLY:
                return body
    finally:
        ch.close()
