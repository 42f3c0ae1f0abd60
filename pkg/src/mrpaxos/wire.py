"""Big-endian, length-prefixed frames used by both transports.

Layout::

    len:u32 | type:u8 | group:u16 | ballot_round:u32 | ballot_node:u16 |
    instance:u64 | votes:u8 | value_kind:u8 | body

``len`` counts the bytes after the length field.  App bodies are
``n:u16`` followed by ``n`` ``(len:u32, bytes)`` entries; Skip bodies are
``count:u64``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Any, Optional

from .core import APP, SKIP, ZERO_BALLOT, Ballot, Value
from .errors import FrameError

PHASE1A = 1
PHASE1B = 2
PHASE2 = 3
DECISION = 4
FETCH = 5
FETCH_REPLY = 6
NACK = 7
CLIENT_SUBMIT = 8
CLIENT_REPLY = 9
# registry protocol, same envelope
REGISTER = 10
VIEW = 11
HEARTBEAT = 12
REGISTER_REJECT = 13
# learner -> coordinator delay sample for latency compensation
DECISION_ACK = 14

KIND_NAMES = {
    PHASE1A: "PHASE1A",
    PHASE1B: "PHASE1B",
    PHASE2: "PHASE2",
    DECISION: "DECISION",
    FETCH: "FETCH",
    FETCH_REPLY: "FETCH_REPLY",
    NACK: "NACK",
    CLIENT_SUBMIT: "CLIENT_SUBMIT",
    CLIENT_REPLY: "CLIENT_REPLY",
    REGISTER: "REGISTER",
    VIEW: "VIEW",
    HEARTBEAT: "HEARTBEAT",
    REGISTER_REJECT: "REGISTER_REJECT",
    DECISION_ACK: "DECISION_ACK",
}

# Kinds that may only travel over ring successor links.
RING_KINDS = frozenset({PHASE1A, PHASE1B, PHASE2, DECISION})

# FETCH_REPLY status codes carried in the votes field
FETCH_OK = 0
FETCH_TRIMMED = 1
FETCH_UNDECIDED = 2

_LEN = struct.Struct(">I")
_HEADER = struct.Struct(">BHIHQBB")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_BALLOT = struct.Struct(">IH")
_ACK = struct.Struct(">d")
_REPLY = struct.Struct(">IQ")

HEADER_SIZE = _LEN.size + _HEADER.size


@dataclass(slots=True)
class Frame:
    """One protocol message.

    ``aux`` is type specific: the accepted ballot for PHASE1B, the last
    requested instance for FETCH, a float timestamp for DECISION_ACK, and
    raw bytes for client replies and registry frames.
    """

    kind: int
    group: int = 0
    ballot: Ballot = ZERO_BALLOT
    instance: int = 0
    votes: int = 0
    value: Optional[Value] = None
    aux: Any = None

    def size(self) -> int:
        """Encoded size without building the bytes (used by the CPU model)."""
        n = HEADER_SIZE
        if self.value is not None:
            n += self.value.nbytes
        aux = self.aux
        if isinstance(aux, (bytes, bytearray)):
            n += len(aux)
        elif aux is not None:
            n += 8
        return n


def encode_value(value: Value) -> bytes:
    if value.kind == SKIP:
        return _U64.pack(value.skip_count)
    parts = [_U16.pack(len(value.payloads))]
    for p in value.payloads:
        parts.append(_U32.pack(len(p)))
        parts.append(p)
    return b"".join(parts)


def decode_value(kind: int, buf: bytes, off: int) -> tuple[Value, int]:
    if kind == SKIP:
        (count,) = _U64.unpack_from(buf, off)
        return Value.skip(count), off + 8
    if kind != APP:
        raise FrameError(f"bad value kind {kind}")
    (n,) = _U16.unpack_from(buf, off)
    off += 2
    payloads = []
    for _ in range(n):
        (ln,) = _U32.unpack_from(buf, off)
        off += 4
        if off + ln > len(buf):
            raise FrameError("truncated payload")
        payloads.append(bytes(buf[off : off + ln]))
        off += ln
    return Value(APP, tuple(payloads)), off


def encode(frame: Frame) -> bytes:
    value = frame.value
    value_kind = 0 if value is None else value.kind
    body_parts = []
    aux = frame.aux
    if frame.kind == PHASE1B:
        b = aux if aux is not None else ZERO_BALLOT
        body_parts.append(_BALLOT.pack(b[0], b[1]))
    elif frame.kind == FETCH:
        body_parts.append(_U64.pack(aux if aux is not None else frame.instance))
    elif frame.kind == DECISION_ACK:
        body_parts.append(_ACK.pack(float(aux or 0.0)))
    if value is not None:
        body_parts.append(encode_value(value))
    if frame.kind not in (PHASE1B, FETCH, DECISION_ACK) and isinstance(aux, (bytes, bytearray)):
        body_parts.append(bytes(aux))
    body = b"".join(body_parts)
    header = _HEADER.pack(
        frame.kind,
        frame.group,
        frame.ballot[0],
        frame.ballot[1],
        frame.instance,
        frame.votes,
        value_kind,
    )
    return _LEN.pack(len(header) + len(body)) + header + body


def decode(data: bytes) -> Frame:
    """Decode one complete frame including its length prefix."""
    if len(data) < HEADER_SIZE:
        raise FrameError("short frame")
    (length,) = _LEN.unpack_from(data)
    if length + _LEN.size != len(data):
        raise FrameError(f"length mismatch: header says {length}, got {len(data) - 4}")
    try:
        kind, group, bround, bnode, instance, votes, value_kind = _HEADER.unpack_from(data, 4)
        off = HEADER_SIZE
        aux: Any = None
        if kind == PHASE1B:
            r, n = _BALLOT.unpack_from(data, off)
            aux = Ballot(r, n)
            off += _BALLOT.size
        elif kind == FETCH:
            (aux,) = _U64.unpack_from(data, off)
            off += 8
        elif kind == DECISION_ACK:
            (aux,) = _ACK.unpack_from(data, off)
            off += _ACK.size
        value = None
        if value_kind:
            value, off = decode_value(value_kind, data, off)
        if off < len(data):
            aux = bytes(data[off:])
        elif aux is None and kind in (CLIENT_REPLY, REGISTER, VIEW, REGISTER_REJECT):
            aux = b""
    except struct.error as exc:
        raise FrameError(str(exc)) from exc
    except ValueError as exc:
        raise FrameError(str(exc)) from exc
    return Frame(kind, group, Ballot(bround, bnode), instance, votes, value, aux)


def split_stream(buf: bytearray) -> list[bytes]:
    """Pop every complete frame off the front of a receive buffer."""
    out = []
    while len(buf) >= 4:
        (length,) = _LEN.unpack_from(buf)
        end = 4 + length
        if len(buf) < end:
            break
        out.append(bytes(buf[:end]))
        del buf[:end]
    return out


# helpers for frames whose body is structured data

def json_frame(kind: int, payload: dict, *, instance: int = 0, node: int = 0) -> Frame:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return Frame(kind, 0, Ballot(0, node), instance, 0, None, body)


def json_body(frame: Frame) -> dict:
    return json.loads(frame.aux.decode()) if frame.aux else {}


def reply_frame(client: int, seq: int, group: int, body: bytes = b"") -> Frame:
    return Frame(CLIENT_REPLY, group, ZERO_BALLOT, seq, 0, None, _REPLY.pack(client, seq) + body)


def parse_reply(frame: Frame) -> tuple[int, int, bytes]:
    client, seq = _REPLY.unpack_from(frame.aux)
    return client, seq, frame.aux[_REPLY.size :]
