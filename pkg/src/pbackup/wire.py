"""Frame codec shared by every live message.

Frame layout (all integers big-endian)::

    u32  length of everything after this field
    u8   protocol version (0x01)
    u8   message type
    32B  sender peer id
    ...  payload
    u32  CRC32 of version..payload

The payload is UTF-8 JSON, except for CHUNK_DATA whose payload is a u32
header length, a JSON header and the raw chunk bytes.
"""
from __future__ import annotations

import json
import struct
import zlib

from .model import PEER_ID_BYTES, PeerId
from .protocol import MsgType

VERSION = 1
MAX_FRAME = 256 * 1024 * 1024
_HEAD = struct.Struct(">IBB")
_U32 = struct.Struct(">I")


class FrameError(ValueError):
    pass


def encode_payload(mtype: MsgType, body: dict, data: bytes = b"") -> bytes:
    head = json.dumps(body, separators=(",", ":"), sort_keys=True).encode()
    if mtype is MsgType.CHUNK_DATA:
        return _U32.pack(len(head)) + head + data
    if data:
        raise ValueError("only CHUNK_DATA frames carry raw bytes")
    return head


def decode_payload(mtype: MsgType, payload: bytes) -> tuple[dict, bytes]:
    try:
        if mtype is MsgType.CHUNK_DATA:
            (n,) = _U32.unpack_from(payload)
            return json.loads(payload[4:4 + n]), payload[4 + n:]
        return json.loads(payload), b""
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad payload: {exc}") from None


def encode_frame(mtype: MsgType, sender: PeerId, body: dict, data: bytes = b"") -> bytes:
    payload = encode_payload(mtype, body, data)
    inner = bytes([VERSION, int(mtype)]) + bytes(sender) + payload
    return _U32.pack(len(inner) + 4) + inner + _U32.pack(zlib.crc32(inner))


def decode_frame(frame: bytes) -> tuple[MsgType, PeerId, dict, bytes]:
    if len(frame) < 4 + 2 + PEER_ID_BYTES + 4:
        raise FrameError("frame too short")
    length, version, mtype = _HEAD.unpack_from(frame)
    if length != len(frame) - 4:
        raise FrameError(f"length field {length} does not match frame of {len(frame)} bytes")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    inner = frame[4:-4]
    (crc,) = _U32.unpack_from(frame, len(frame) - 4)
    if zlib.crc32(inner) != crc:
        raise FrameError("CRC mismatch")
    try:
        mt = MsgType(mtype)
    except ValueError:
        raise FrameError(f"unknown message type {mtype}") from None
    sender = PeerId(inner[2:2 + PEER_ID_BYTES])
    body, data = decode_payload(mt, inner[2 + PEER_ID_BYTES:])
    if not isinstance(body, dict):
        raise FrameError("payload is not an object")
    return mt, sender, body, data
