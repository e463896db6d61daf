"""Mutually authenticated, encrypted message channel over TCP.

Handshake (each message u32-length-prefixed)::

    client -> server   "PBH1" | client static Ed25519 key | ephemeral X25519 key | 16B nonce
    server -> client   "PBH1" | server static key | ephemeral key | nonce | sig(server, H(transcript))
    client -> server   sig(client, H(transcript including the server signature))

Both sides derive two ChaCha20-Poly1305 keys with HKDF over the X25519 secret,
salted with the transcript hash.  Each record is a u32 length and one sealed
frame; nonces are per-direction counters.  A peer's id is the SHA-256 of its
static key, so a client that knows the id it dialed detects impostors.
"""
from __future__ import annotations

import asyncio
import hashlib
import os
import struct
import time
from pathlib import Path

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .model import PeerId, derive_peer_id
from .wire import MAX_FRAME

MAGIC = b"PBH1"
_U32 = struct.Struct(">I")
SLICE = 64 * 1024


class HandshakeError(ConnectionError):
    pass


class Identity:
    def __init__(self, key: Ed25519PrivateKey):
        self.key = key
        self.public = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        self.peer = derive_peer_id(self.public)

    @classmethod
    def generate(cls) -> "Identity":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Identity":
        key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
        if not isinstance(key, Ed25519PrivateKey):
            raise ValueError(f"{path}: not an Ed25519 private key")
        return cls(key)

    def save(self, path: str | os.PathLike) -> None:
        pem = self.key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                     serialization.NoEncryption())
        path = Path(path)
        path.write_bytes(pem)
        path.chmod(0o600)

    def sign(self, data: bytes) -> bytes:
        return self.key.sign(data)


def verify(public: bytes, sig: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, data)
        return True
    except (InvalidSignature, ValueError):
        return False


class TokenBucket:
    """Caps long-run throughput at ``rate`` bytes/s with bursts up to ``burst``."""

    def __init__(self, rate: float, burst: float = SLICE):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.burst = burst
        self.tokens = burst
        self.stamp = time.monotonic()
        self._lock = asyncio.Lock()

    async def consume(self, n: int) -> None:
        async with self._lock:
            while True:
                now = time.monotonic()
                self.tokens = min(self.burst, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= min(n, self.burst):
                    self.tokens -= n
                    return
                await asyncio.sleep((min(n, self.burst) - self.tokens) / self.rate)


async def _read_msg(reader: asyncio.StreamReader, limit: int = 4096) -> bytes:
    (n,) = _U32.unpack(await reader.readexactly(4))
    if n > limit:
        raise HandshakeError(f"handshake message of {n} bytes")
    return await reader.readexactly(n)


def _write_msg(writer: asyncio.StreamWriter, data: bytes) -> None:
    writer.write(_U32.pack(len(data)) + data)


def _hello(identity: Identity, eph: X25519PrivateKey, nonce: bytes) -> bytes:
    pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return MAGIC + identity.public + pub + nonce


def _parse_hello(raw: bytes, with_sig: bool) -> tuple[bytes, bytes, bytes]:
    want = 4 + 32 + 32 + 16 + (64 if with_sig else 0)
    if len(raw) != want or raw[:4] != MAGIC:
        raise HandshakeError("malformed hello")
    return raw[4:36], raw[36:68], raw[84:148] if with_sig else b""


def _keys(secret: bytes, transcript: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(hashes.SHA256(), 64, salt=hashlib.sha256(transcript).digest(), info=b"pbackup channel v1").derive(secret)
    return okm[:32], okm[32:]


class SecureChannel:
    def __init__(self, reader, writer, send_key: bytes, recv_key: bytes, peer: PeerId, peer_public: bytes):
        self.reader = reader
        self.writer = writer
        self._send = ChaCha20Poly1305(send_key)
        self._recv = ChaCha20Poly1305(recv_key)
        self._send_ctr = 0
        self._recv_ctr = 0
        self._lock = asyncio.Lock()
        self.peer = peer
        self.peer_public = peer_public

    @staticmethod
    def _nonce(ctr: int) -> bytes:
        return b"\0\0\0\0" + ctr.to_bytes(8, "big")

    async def send(self, frame: bytes, bucket: TokenBucket | None = None) -> None:
        async with self._lock:
            sealed = self._send.encrypt(self._nonce(self._send_ctr), frame, None)
            self._send_ctr += 1
            record = _U32.pack(len(sealed)) + sealed
            if bucket is None:
                self.writer.write(record)
                await self.writer.drain()
                return
            for i in range(0, len(record), SLICE):
                piece = record[i:i + SLICE]
                await bucket.consume(len(piece))
                self.writer.write(piece)
                await self.writer.drain()

    async def recv(self) -> bytes:
        (n,) = _U32.unpack(await self.reader.readexactly(4))
        if n > MAX_FRAME + 16:
            raise ConnectionError(f"record of {n} bytes exceeds the frame limit")
        sealed = await self.reader.readexactly(n)
        try:
            frame = self._recv.decrypt(self._nonce(self._recv_ctr), sealed, None)
        except InvalidTag:
            raise ConnectionError("record failed authentication") from None
        self._recv_ctr += 1
        return frame

    def close(self) -> None:
        if not self.writer.is_closing():
            self.writer.close()


async def client_handshake(reader, writer, identity: Identity, expected: PeerId | None = None) -> SecureChannel:
    eph = X25519PrivateKey.generate()
    c_hello = _hello(identity, eph, os.urandom(16))
    _write_msg(writer, c_hello)
    await writer.drain()
    s_full = await _read_msg(reader)
    s_static, s_eph, s_sig = _parse_hello(s_full, with_sig=True)
    s_hello = s_full[:-64]
    peer = derive_peer_id(s_static)
    if expected is not None and peer != expected:
        raise HandshakeError(f"dialed {expected.short} but reached {peer.short}")
    if not verify(s_static, s_sig, b"pbackup server" + hashlib.sha256(c_hello + s_hello).digest()):
        raise HandshakeError("server signature invalid")
    transcript = c_hello + s_full
    _write_msg(writer, identity.sign(b"pbackup client" + hashlib.sha256(transcript).digest()))
    await writer.drain()
    secret = eph.exchange(X25519PublicKey.from_public_bytes(s_eph))
    c2s, s2c = _keys(secret, transcript)
    return SecureChannel(reader, writer, c2s, s2c, peer, s_static)


async def server_handshake(reader, writer, identity: Identity) -> SecureChannel:
    c_hello = await _read_msg(reader)
    c_static, c_eph, _ = _parse_hello(c_hello, with_sig=False)
    eph = X25519PrivateKey.generate()
    s_hello = _hello(identity, eph, os.urandom(16))
    s_full = s_hello + identity.sign(b"pbackup server" + hashlib.sha256(c_hello + s_hello).digest())
    _write_msg(writer, s_full)
    await writer.drain()
    transcript = c_hello + s_full
    c_sig = await _read_msg(reader)
    if not verify(c_static, c_sig, b"pbackup client" + hashlib.sha256(transcript).digest()):
        raise HandshakeError("client signature invalid")
    secret = eph.exchange(X25519PublicKey.from_public_bytes(c_eph))
    c2s, s2c = _keys(secret, transcript)
    return SecureChannel(reader, writer, s2c, c2s, derive_peer_id(c_static), c_static)


async def open_channel(host: str, port: int, identity: Identity, expected: PeerId | None = None,
                       timeout: float = 5.0) -> SecureChannel:
    """Connect and authenticate; raises ``ConnectionError``/``OSError``/``asyncio.TimeoutError``."""
    async def go():
        reader, writer = await asyncio.open_connection(host, port)
        try:
            return await client_handshake(reader, writer, identity, expected)
        except BaseException:
            writer.close()
            raise
    return await asyncio.wait_for(go(), timeout)


async def accept_channel(reader, writer, identity: Identity, timeout: float = 5.0) -> SecureChannel:
    return await asyncio.wait_for(server_handshake(reader, writer, identity), timeout)
