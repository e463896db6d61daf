"""Spawn real daemons on localhost for integration tests."""
from __future__ import annotations

import asyncio
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import yaml

from pbackup.chunkstore import ChunkStore
from pbackup.daemon import query_status
from pbackup.model import ChunkId
from pbackup.tcp import Identity

FAST = {
    "bandwidth": 20e6,
    "chunk_size": 2_000_000,
    "synchro_count": 2,
    "connect_timeout": 2.0,
    "scan_period": 1.0,
    "anti_entropy_period": 0.5,
    "fsync": False,
    "policy": {"N_r": 2, "Des_Tb": 60.0, "Des_Tr": 60.0},
    "optimizer": {"alpha": 1.0, "period_T": 0.3, "N_est": 1, "taboo_ttl": 2.0},
    "engine": {"commit_period": 1.0, "repair_period": 1.0},
    "timers": {"relay_tick": 0.5, "maintenance_period": 0.3, "offer_timeout": 3.0, "swap_timeout": 10.0,
               "rebuild_wait": 3.0},
}


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveNode:
    def __init__(self, root: Path, name: str, port: int, bootstrap: list[str], data: bytes, quota: int):
        self.root = root / name
        self.root.mkdir(parents=True, exist_ok=True)
        self.key = self.root / "node.key"
        self.identity = Identity.generate()
        self.identity.save(self.key)
        self.port = port
        self.data_file = self.root / "backup.bin"
        self.data_file.write_bytes(data)
        self.data = data
        self.config = self.root / "node.yaml"
        cfg = dict(FAST, key="node.key", listen=f"127.0.0.1:{port}", data_dir="state", quota=quota,
                   bootstrap=bootstrap, backup_paths=["backup.bin"], site=name)
        self.config.write_text(yaml.safe_dump(cfg))
        self.proc: subprocess.Popen | None = None

    @property
    def addr(self) -> tuple[str, int]:
        return "127.0.0.1", self.port

    @property
    def state_dir(self) -> Path:
        return self.root / "state"

    def start(self, *extra: str) -> None:
        env = dict(os.environ, PB_LOG=os.environ.get("PB_LOG", "WARNING"))
        self.log = open(self.root / "daemon.log", "ab")
        self.proc = subprocess.Popen([sys.executable, "-m", "pbackup.cli", "node", "run", str(self.config), *extra],
                                     stdout=self.log, stderr=subprocess.STDOUT, env=env)

    def kill(self, sig=signal.SIGKILL) -> int:
        self.proc.send_signal(sig)
        try:
            code = self.proc.wait(timeout=20)
        except subprocess.TimeoutExpired:
            self.proc.kill()  # a hung shutdown must not leak the process
            self.proc.wait()
            raise
        finally:
            self.log.close()
        return code

    def status(self, timeout: float = 3.0) -> dict | None:
        try:
            return asyncio.run(query_status(self.addr, timeout))
        except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError):
            return None

    def pieces(self, chunk_size: int = FAST["chunk_size"]) -> list[bytes]:
        return [self.data[i:i + chunk_size] for i in range(0, len(self.data), chunk_size)]

    def restored(self) -> list[bytes | None]:
        """Owned chunk bytes on disk in index order (None where missing)."""
        store = ChunkStore(self.state_dir / "owned", 1 << 40, me=self.identity.peer, fsync=False)
        out = []
        for i in range(len(self.pieces())):
            got = store.get_chunk(ChunkId(self.identity.peer, i))
            out.append(None if got is None else got[1])
        return out


def fully_backed_up(st: dict | None, nchunks: int, n_r: int) -> bool:
    if st is None or st["chunks"] != nchunks:
        return False
    per_chunk: dict[str, int] = {}
    for chunk, _, state, acked in st["contracts"]:
        if state == "COMMITTED" and acked >= 0:
            per_chunk[chunk] = per_chunk.get(chunk, 0) + 1
    return len(per_chunk) == nchunks and all(v >= n_r for v in per_chunk.values())


def wait_for(pred, timeout: float, step: float = 0.5) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return False


def make_cluster(root: Path, n: int = 3, size: int = 10_000_000, seed: int = 0) -> list[LiveNode]:
    import random
    rng = random.Random(seed)
    ports = [free_port() for _ in range(n)]
    boot = [f"127.0.0.1:{ports[0]}"]
    return [LiveNode(root, f"n{i}", ports[i], boot, rng.randbytes(size), quota=4 * size) for i in range(n)]
