"""Replicated key-value store used as the example application.

Commands are applied in delivery order, so replicas that deliver the same
stream end in the same state.  Snapshots are full serializations of a
point-in-time copy, which is what a copy-on-write structure would hand to a
checkpoint writer.
"""
from __future__ import annotations

import bisect
import hashlib
import random
import struct
from dataclasses import dataclass
from typing import Optional

from .errors import FrameError, KeyNotFound

INSERT, REMOVE, READ, UPDATE, RANGE = 1, 2, 3, 4, 5
OPS = {"insert": INSERT, "remove": REMOVE, "read": READ, "update": UPDATE, "range": RANGE}

OK = 0
NOT_FOUND = 1

_CMD = struct.Struct(">BH")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class KvCommand:
    op: int
    key: bytes
    value: bytes = b""
    # exclusive upper bound for range queries
    hi: bytes = b""

    def encode(self) -> bytes:
        return b"".join([
            _CMD.pack(self.op, len(self.key)), self.key,
            _U32.pack(len(self.value)), self.value,
            _U16.pack(len(self.hi)), self.hi,
        ])

    @classmethod
    def decode(cls, data: bytes) -> "KvCommand":
        try:
            op, klen = _CMD.unpack_from(data)
            off = _CMD.size
            key = data[off : off + klen]
            off += klen
            (vlen,) = _U32.unpack_from(data, off)
            off += 4
            value = data[off : off + vlen]
            off += vlen
            (hlen,) = _U16.unpack_from(data, off)
            off += 2
            hi = data[off : off + hlen]
        except struct.error as exc:
            raise FrameError(f"bad kv command: {exc}") from exc
        if op not in OPS.values():
            raise FrameError(f"bad kv op {op}")
        return cls(op, bytes(key), bytes(value), bytes(hi))


class KvStore:
    def __init__(self):
        self.data: dict[bytes, bytes] = {}
        self.keys: list[bytes] = []
        self.applied = 0

    def insert(self, key: bytes, value: bytes) -> None:
        if key not in self.data:
            bisect.insort(self.keys, key)
        self.data[key] = value

    def remove(self, key: bytes) -> bytes:
        if key not in self.data:
            raise KeyNotFound(key)
        i = bisect.bisect_left(self.keys, key)
        del self.keys[i]
        return self.data.pop(key)

    def read(self, key: bytes) -> bytes:
        try:
            return self.data[key]
        except KeyError:
            raise KeyNotFound(key) from None

    def update(self, key: bytes, value: bytes) -> None:
        if key not in self.data:
            raise KeyNotFound(key)
        self.data[key] = value

    def range(self, lo: bytes, hi: bytes) -> list[tuple[bytes, bytes]]:
        i = bisect.bisect_left(self.keys, lo)
        j = bisect.bisect_left(self.keys, hi) if hi else len(self.keys)
        return [(k, self.data[k]) for k in self.keys[i:j]]

    # -- replica interface ------------------------------------------------

    def apply(self, delivery) -> bytes:
        self.applied += 1
        return kv_apply(self, KvCommand.decode(delivery.payload))

    def snapshot(self) -> bytes:
        parts = [_U32.pack(len(self.keys))]
        for k in self.keys:
            v = self.data[k]
            parts.append(_U16.pack(len(k)))
            parts.append(k)
            parts.append(_U32.pack(len(v)))
            parts.append(v)
        return b"".join(parts)

    def restore(self, blob: bytes) -> None:
        self.data = {}
        self.keys = []
        if not blob:
            return
        (n,) = _U32.unpack_from(blob)
        off = 4
        for _ in range(n):
            (kl,) = _U16.unpack_from(blob, off)
            off += 2
            k = bytes(blob[off : off + kl])
            off += kl
            (vl,) = _U32.unpack_from(blob, off)
            off += 4
            self.data[k] = bytes(blob[off : off + vl])
            off += vl
            self.keys.append(k)

    def state_hash(self) -> str:
        return hashlib.sha256(self.snapshot()).hexdigest()


def _reply(status: int, body: bytes = b"") -> bytes:
    return bytes([status]) + body


def kv_apply(store: KvStore, cmd: KvCommand) -> bytes:
    """Apply one command; absent keys produce a NOT_FOUND reply, not an error."""
    try:
        if cmd.op == INSERT:
            store.insert(cmd.key, cmd.value)
            return _reply(OK)
        if cmd.op == REMOVE:
            store.remove(cmd.key)
            return _reply(OK)
        if cmd.op == READ:
            return _reply(OK, store.read(cmd.key))
        if cmd.op == UPDATE:
            store.update(cmd.key, cmd.value)
            return _reply(OK)
        rows = store.range(cmd.key, cmd.hi)
        return _reply(OK, b"".join(_U16.pack(len(k)) + k for k, _ in rows))
    except KeyNotFound:
        return _reply(NOT_FOUND)


class LogApp:
    """Minimal replica: a running hash over every delivered payload."""

    def __init__(self):
        self.count = 0
        self.digest = b"\0" * 32

    def apply(self, delivery) -> Optional[bytes]:
        self.count += 1
        self.digest = hashlib.sha256(self.digest + delivery.payload).digest()
        return None

    def snapshot(self) -> bytes:
        return struct.pack(">Q", self.count) + self.digest

    def restore(self, blob: bytes) -> None:
        if not blob:
            self.count, self.digest = 0, b"\0" * 32
            return
        (self.count,) = struct.unpack_from(">Q", blob)
        self.digest = bytes(blob[8:40])

    def state_hash(self) -> str:
        return hashlib.sha256(self.snapshot()).hexdigest()


class KvWorkload:
    """Mix of KV commands with values padded to a target payload size."""

    def __init__(self, rng: random.Random, size: int = 1024, keys: int = 1000,
                 mix: Optional[dict] = None):
        self.rng = rng
        self.size = size
        self.keys = keys
        self.mix = mix or {"update": 0.6, "insert": 0.2, "read": 0.1, "remove": 0.05, "range": 0.05}
        self.ops = list(self.mix)
        self.weights = [self.mix[o] for o in self.ops]

    def next(self) -> bytes:
        rng = self.rng
        op = rng.choices(self.ops, self.weights)[0]
        key = b"k%06d" % rng.randrange(self.keys)
        overhead = _CMD.size + len(key) + 4 + 2
        if op in ("insert", "update"):
            value = bytes([rng.randrange(256)]) * max(0, self.size - overhead)
            return KvCommand(OPS[op], key, value).encode()
        if op == "range":
            hi = b"k%06d" % min(self.keys, int(key[1:]) + 10)
            return KvCommand(RANGE, key, b"", hi).encode()
        return KvCommand(OPS[op], key).encode()
