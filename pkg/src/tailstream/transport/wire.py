"""Binary framing for node-to-node connections.

A connection starts with a preamble (magic, protocol version, node id).
After that both directions carry length-prefixed frames::

    <u32 length> <u8 kind> <i64 job> <u32 vertex> <u16 ordinal> <u32 sender node> <payload>

``length`` counts every byte after itself. All integers are little-endian.
Payloads of DATA/BARRIER/WATERMARK/CONTROL frames are pickled Python
objects; ACK payloads are a fixed struct.
"""

from __future__ import annotations

import pickle
import struct
from dataclasses import dataclass
from enum import IntEnum

from .flow import AckMessage

MAGIC = b"TSTR"
PROTOCOL_VERSION = 1

_PREAMBLE = struct.Struct("<4sBI")
_LENGTH = struct.Struct("<I")
_HEADER = struct.Struct("<BqIHI")
_ACK = struct.Struct("<IqI")

PREAMBLE_SIZE = _PREAMBLE.size
HEADER_SIZE = _HEADER.size
MAX_FRAME = 1 << 30


class FrameKind(IntEnum):
    DATA = 1
    ACK = 2
    BARRIER = 3
    WATERMARK = 4
    CONTROL = 5


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class WireFrame:
    kind: FrameKind
    job_id: int
    vertex_id: int
    ordinal: int
    sender_node: int
    payload: bytes = b""

    def encode(self) -> bytes:
        header = _HEADER.pack(int(self.kind), self.job_id, self.vertex_id, self.ordinal, self.sender_node)
        return _LENGTH.pack(len(header) + len(self.payload)) + header + self.payload

    @classmethod
    def decode_body(cls, body) -> "WireFrame":
        if len(body) < HEADER_SIZE:
            raise ProtocolError(f"frame body too short: {len(body)} bytes")
        kind, job, vertex, ordinal, sender = _HEADER.unpack_from(body, 0)
        try:
            kind = FrameKind(kind)
        except ValueError:
            raise ProtocolError(f"unknown frame kind {kind}") from None
        return cls(kind, job, vertex, ordinal, sender, bytes(body[HEADER_SIZE:]))

    @classmethod
    def decode(cls, data: bytes) -> "WireFrame":
        (length,) = _LENGTH.unpack_from(data, 0)
        if len(data) != _LENGTH.size + length:
            raise ProtocolError("length prefix does not match frame size")
        return cls.decode_body(memoryview(data)[_LENGTH.size:])

    def object(self):
        """Unpickled payload (DATA, BARRIER, WATERMARK, CONTROL)."""
        return pickle.loads(self.payload)

    def ack(self) -> AckMessage:
        sender_instance, acked, window = _ACK.unpack(self.payload)
        return AckMessage(self.ordinal, acked, window, sender_instance)


def encode_preamble(node_id: int) -> bytes:
    return _PREAMBLE.pack(MAGIC, PROTOCOL_VERSION, node_id)


def decode_preamble(data: bytes) -> int:
    magic, version, node_id = _PREAMBLE.unpack(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    return node_id


def dumps(obj) -> bytes:
    return pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)


def data_frame(job_id, vertex_id, ordinal, sender_node, sender_instance, first_seq, items):
    payload = dumps((sender_instance, first_seq, items))
    return WireFrame(FrameKind.DATA, job_id, vertex_id, ordinal, sender_node, payload)


def item_frame(kind, job_id, vertex_id, ordinal, sender_node, sender_instance, seq, item):
    payload = dumps((sender_instance, seq, [item]))
    return WireFrame(kind, job_id, vertex_id, ordinal, sender_node, payload)


def ack_frame(job_id, vertex_id, sender_node, ack: AckMessage) -> WireFrame:
    payload = _ACK.pack(ack.sender_instance, ack.acked_seq, ack.window_size)
    return WireFrame(FrameKind.ACK, job_id, vertex_id, ack.ordinal, sender_node, payload)


def control_frame(sender_node, message, job_id=0) -> WireFrame:
    return WireFrame(FrameKind.CONTROL, job_id, 0, 0, sender_node, dumps(message))


class FrameDecoder:
    """Incremental decoder: feed raw stream bytes, collect whole frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf += data
        frames = []
        buf = self._buf
        pos = 0
        while len(buf) - pos >= _LENGTH.size:
            (length,) = _LENGTH.unpack_from(buf, pos)
            if length > MAX_FRAME or length < HEADER_SIZE:
                raise ProtocolError(f"invalid frame length {length}")
            end = pos + _LENGTH.size + length
            if end > len(buf):
                break
            frames.append(WireFrame.decode_body(bytes(buf[pos + _LENGTH.size:end])))
            pos = end
        if pos:
            del buf[:pos]
        return frames
