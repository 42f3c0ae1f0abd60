"""Checkpoints tagged with merge progress, and the two replica recovery procedures.

The cache-first procedure (:class:`CachingRecovery`) joins the rings as a
silent listener, caches every decision it sees, and waits for a checkpoint
that covers everything before the cache.  It never asks acceptors for old
decisions.  The log-tail procedure (:class:`LogTailRecovery`) installs the
newest checkpoint and fetches the missing decisions from acceptors.
"""
from __future__ import annotations

import enum
import logging
import os
import re
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .core import GroupId, Value, normalize_groups
from .errors import (
    FrameError,
    StoreUnavailable,
    SubscriptionMismatch,
    Trimmed,
    ValidityViolated,
)
from .merge import MergeCursor

log = logging.getLogger(__name__)


class RecoveryPhase(enum.IntEnum):
    CACHING = 0
    FETCHING_CHECKPOINT = 1
    REPLAYING = 2
    LIVE = 3


@dataclass
class Checkpoint:
    checkpoint_id: int
    ring_slots: dict[GroupId, int]
    state_blob: bytes
    # (instance, offset) of the first slot not covered, per ring
    positions: dict[GroupId, tuple[int, int]] = field(default_factory=dict)
    node: int = 0

    @property
    def size_bytes(self) -> int:
        return len(self.state_blob)

    @property
    def rings(self) -> tuple[GroupId, ...]:
        return normalize_groups(self.ring_slots)

    @property
    def coverage(self) -> int:
        return sum(self.ring_slots.values())


def take_checkpoint(cursor: MergeCursor, app, checkpoint_id: int, node: int = 0) -> Checkpoint:
    """Snapshot ``app`` at the cursor's current merge position."""
    return Checkpoint(
        checkpoint_id=checkpoint_id,
        ring_slots=dict(cursor.consumed_slots),
        state_blob=app.snapshot(),
        positions=cursor.positions(),
        node=node,
    )


# -- file layout -------------------------------------------------------------
#
# magic "MRCP" | version:u16 | checkpoint_id:u64 | ring_count:u16 |
# ring_count x (group:u16, slots:u64) | blob_len:u64 | blob |
# ring_count x (group:u16, instance:u64, offset:u64)

MAGIC = b"MRCP"
VERSION = 1
_HEAD = struct.Struct(">4sHQH")
_RING = struct.Struct(">HQ")
_BLOB = struct.Struct(">Q")
_POS = struct.Struct(">HQQ")
_NAME = re.compile(r"^cp_(\d+)_(\d+)\.mrcp$")


def encode_checkpoint(cp: Checkpoint) -> bytes:
    rings = cp.rings
    parts = [_HEAD.pack(MAGIC, VERSION, cp.checkpoint_id, len(rings))]
    for g in rings:
        parts.append(_RING.pack(g, cp.ring_slots[g]))
    parts.append(_BLOB.pack(len(cp.state_blob)))
    parts.append(cp.state_blob)
    for g in rings:
        inst, off = cp.positions.get(g, (0, 0))
        parts.append(_POS.pack(g, inst, off))
    return b"".join(parts)


def decode_checkpoint(data: bytes, node: int = 0) -> Checkpoint:
    try:
        magic, version, cid, count = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise FrameError("not a checkpoint file")
        if version != VERSION:
            raise FrameError(f"unsupported checkpoint version {version}")
        off = _HEAD.size
        slots = {}
        for _ in range(count):
            g, s = _RING.unpack_from(data, off)
            slots[g] = s
            off += _RING.size
        (blen,) = _BLOB.unpack_from(data, off)
        off += _BLOB.size
        blob = bytes(data[off : off + blen])
        if len(blob) != blen:
            raise FrameError("truncated checkpoint blob")
        off += blen
        positions = {}
        if off < len(data):
            for _ in range(count):
                g, inst, o = _POS.unpack_from(data, off)
                positions[g] = (inst, o)
                off += _POS.size
    except struct.error as exc:
        raise FrameError(str(exc)) from exc
    return Checkpoint(cid, slots, blob, positions, node)


def checkpoint_filename(cp: Checkpoint) -> str:
    return f"cp_{cp.checkpoint_id}_{cp.node}.mrcp"


# -- stores ------------------------------------------------------------------

class MemoryStore:
    """In-process checkpoint store (simulation and tests)."""

    def __init__(self):
        self.available = True
        self._items: dict[tuple[int, int], Checkpoint] = {}

    def put(self, cp: Checkpoint) -> None:
        if not self.available:
            raise StoreUnavailable("checkpoint store down")
        self._items[(cp.node, cp.checkpoint_id)] = cp

    def candidates(self, rings: Iterable[GroupId]) -> list[Checkpoint]:
        """Checkpoints for exactly this subscription, widest coverage first."""
        if not self.available:
            raise StoreUnavailable("checkpoint store down")
        rings = normalize_groups(rings)
        cps = [cp for cp in self._items.values() if cp.rings == rings]
        cps.sort(key=lambda c: (c.coverage, c.node, c.checkpoint_id), reverse=True)
        return cps

    def latest(self, rings: Iterable[GroupId]) -> Optional[Checkpoint]:
        cps = self.candidates(rings)
        return cps[0] if cps else None


class DirectoryStore(MemoryStore):
    """Checkpoints as ``cp_<id>_<node>.mrcp`` files in a shared directory."""

    def __init__(self, path):
        super().__init__()
        self.path = Path(path)

    def put(self, cp: Checkpoint) -> None:
        if not self.available:
            raise StoreUnavailable("checkpoint store down")
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            final = self.path / checkpoint_filename(cp)
            tmp = final.with_suffix(".tmp")
            tmp.write_bytes(encode_checkpoint(cp))
            os.replace(tmp, final)
        except OSError as exc:
            raise StoreUnavailable(str(exc)) from exc

    def candidates(self, rings: Iterable[GroupId]) -> list[Checkpoint]:
        if not self.available or not self.path.is_dir():
            raise StoreUnavailable(f"cannot read {self.path}")
        rings = normalize_groups(rings)
        cps = []
        for f in self.path.iterdir():
            m = _NAME.match(f.name)
            if not m:
                continue
            try:
                cp = decode_checkpoint(f.read_bytes(), node=int(m.group(2)))
            except (OSError, FrameError):
                log.warning("skipping unreadable checkpoint %s", f)
                continue
            if cp.rings == rings:
                cps.append(cp)
        cps.sort(key=lambda c: (c.coverage, c.node, c.checkpoint_id), reverse=True)
        return cps


# -- cache and validity ------------------------------------------------------

class CacheBuffer:
    """Decisions cached by a recovering learner.

    ``start_instance[g]`` is the first cached instance of ring ``g``.  The
    matching slot count ``start_slots[g]`` may be unknown (None) until a
    checkpoint tells us how many slots precede it.
    """

    def __init__(self, rings: Iterable[GroupId], capacity_bytes: int = 256 << 20,
                 start_slots: Optional[Mapping[GroupId, int]] = None):
        self.rings = normalize_groups(rings)
        self.capacity_bytes = capacity_bytes
        self.start_slots: dict[GroupId, Optional[int]] = {g: None for g in self.rings}
        if start_slots is not None:
            if set(start_slots) != set(self.rings):
                raise SubscriptionMismatch("start slots do not match rings")
            self.start_slots.update(start_slots)
        self.start_instance: dict[GroupId, Optional[int]] = {g: None for g in self.rings}
        self.per_ring: dict[GroupId, deque] = {g: deque() for g in self.rings}
        self.entries: deque = deque()
        self.bytes_used = 0
        self.dropped = 0
        self.restarts = 0

    def next_instance(self, g: GroupId) -> Optional[int]:
        q = self.per_ring[g]
        if q:
            return q[-1][0] + 1
        return self.start_instance[g]

    def append(self, group: GroupId, instance: int, value: Value) -> None:
        expected = self.next_instance(group)
        if expected is None:
            self.start_instance[group] = instance
        elif instance < expected:
            return
        elif instance > expected:
            # a hole; the cache for this ring restarts at the new boundary
            self._reset_ring(group, instance)
        self.per_ring[group].append((instance, value))
        self.entries.append((group, instance, value))
        self.bytes_used += value.nbytes
        while self.bytes_used > self.capacity_bytes and self.entries:
            self._drop_oldest()

    def _reset_ring(self, group: GroupId, instance: int) -> None:
        self.restarts += 1
        self.entries = deque(e for e in self.entries if e[0] != group)
        self.bytes_used = sum(e[2].nbytes for e in self.entries)
        self.per_ring[group].clear()
        self.start_instance[group] = instance
        self.start_slots[group] = None

    def _drop_oldest(self) -> None:
        g, inst, value = self.entries.popleft()
        self.per_ring[g].popleft()
        self.bytes_used -= value.nbytes
        self.dropped += 1
        self.start_instance[g] = inst + 1
        if self.start_slots[g] is not None:
            self.start_slots[g] += value.slots

    def ready(self) -> bool:
        return all(s is not None for s in self.start_instance.values())

    def derive_start_slots(self, cp: Checkpoint) -> Optional[dict[GroupId, int]]:
        """Slot counts at the cache start implied by ``cp``'s positions.

        When the checkpoint ends before the cache begins the true count is
        unknown but larger than the checkpoint's, which is all validity needs.
        """
        if not self.ready() or set(cp.ring_slots) != set(self.rings):
            return None
        out = {}
        for g in self.rings:
            si = self.start_instance[g]
            ci, coff = cp.positions.get(g, (None, 0))
            if ci is None:
                return None
            if ci < si:
                out[g] = cp.ring_slots[g] + (si - ci)
                continue
            covered = coff
            for inst, value in self.per_ring[g]:
                if inst >= ci:
                    break
                covered += value.slots
            out[g] = cp.ring_slots[g] - covered
        return out

    def view(self, start_slots: Mapping[GroupId, int]) -> "CacheBuffer":
        """Same cached entries with known start slot counts."""
        cb = CacheBuffer(self.rings, self.capacity_bytes, start_slots)
        cb.start_instance = dict(self.start_instance)
        cb.per_ring = self.per_ring
        cb.entries = self.entries
        cb.bytes_used = self.bytes_used
        return cb


def is_valid_checkpoint(cp: Checkpoint, cache: CacheBuffer) -> bool:
    """True iff the checkpoint leaves no gap before the cached decisions."""
    if set(cp.ring_slots) != set(cache.start_slots):
        raise SubscriptionMismatch(f"{sorted(cp.ring_slots)} vs {sorted(cache.start_slots)}")
    for g, start in cache.start_slots.items():
        if start is None or cp.ring_slots[g] < start:
            return False
    return True


def replay_positions(cp: Checkpoint, cache: CacheBuffer) -> dict[GroupId, tuple[int, int]]:
    """Where each ring's merge resumes: first cached (instance, offset) not in ``cp``."""
    out = {}
    for g in cache.rings:
        cached = cache.per_ring[g]
        if g in cp.positions and cached and cp.positions[g][0] > cached[-1][0]:
            # the checkpoint already covers the whole cache for this ring
            out[g] = tuple(cp.positions[g])
            continue
        slot = cache.start_slots[g]
        target = cp.ring_slots[g]
        pos = None
        last = None
        for inst, value in cache.per_ring[g]:
            last = inst
            if slot + value.slots > target:
                pos = (inst, target - slot)
                break
            slot += value.slots
        if pos is None:
            if slot == target and last is not None:
                pos = (last + 1, 0)
            elif g in cp.positions:
                pos = tuple(cp.positions[g])
            elif last is None and slot == target:
                pos = (cache.start_instance[g] or 0, 0)
            else:
                raise ValidityViolated(f"ring {g}: checkpoint beyond cache without positions")
        if g in cp.positions and tuple(cp.positions[g]) != pos:
            raise ValidityViolated(f"ring {g}: checkpoint position {cp.positions[g]} != {pos}")
        out[g] = pos
    return out


def install_and_replay(cp: Checkpoint, cache: CacheBuffer, app, m: int = 1):
    """Install ``cp`` into ``app`` and apply cached decisions it does not cover.

    Returns ``(cursor, deliveries)``; the cursor continues from the cache
    frontier.
    """
    if not is_valid_checkpoint(cp, cache):
        raise ValidityViolated("checkpoint does not cover the slots before the cache")
    positions = replay_positions(cp, cache)
    app.restore(cp.state_blob)
    cursor = MergeCursor.resume(cache.rings, m, cp.ring_slots, positions)
    for g in cache.rings:
        first = positions[g][0]
        for inst, value in cache.per_ring[g]:
            if inst >= first:
                cursor.enqueue_decision(g, inst, value)
    deliveries = cursor.try_deliver()
    for d in deliveries:
        app.apply(d)
    return cursor, deliveries


# -- runtime procedures ------------------------------------------------------

class CachingRecovery:
    """Cache first, then wait for a valid checkpoint.  Issues no fetches.

    ``host`` supplies ``after(delay, fn)``, ``load_checkpoints(rings, cb)``,
    ``app``, ``m`` and ``go_live(cursor, deliveries)``.
    """

    fetches = 0

    def __init__(self, host, rings, capacity_bytes: int = 256 << 20, poll_interval: float = 0.5):
        self.host = host
        self.rings = normalize_groups(rings)
        self.cache = CacheBuffer(self.rings, capacity_bytes)
        self.poll_interval = poll_interval
        self.phase = RecoveryPhase.CACHING
        self.installed: Optional[Checkpoint] = None
        self.polls = 0
        # per ring (instance, offset) where delivery resumed after the checkpoint
        self.resume_at: dict = {}

    def _advance(self, phase: RecoveryPhase) -> None:
        if phase < self.phase:
            raise ValueError(f"recovery phase cannot go back from {self.phase!r} to {phase!r}")
        self.phase = phase

    def start(self) -> None:
        self.host.after(self.poll_interval, self._poll)

    def on_decision(self, group: GroupId, instance: int, value: Value) -> None:
        if self.phase < RecoveryPhase.REPLAYING:
            self.cache.append(group, instance, value)

    def _poll(self) -> None:
        if self.phase >= RecoveryPhase.REPLAYING or not self.host.alive:
            return
        self.polls += 1
        if not self.cache.ready():
            self.host.after(self.poll_interval, self._poll)
            return
        self._advance(RecoveryPhase.FETCHING_CHECKPOINT)
        self.host.load_checkpoints(self.rings, self._on_checkpoints)

    def _on_checkpoints(self, cps: list[Checkpoint]) -> None:
        if self.phase >= RecoveryPhase.REPLAYING or not self.host.alive:
            return
        for cp in cps:
            start = self.cache.derive_start_slots(cp)
            if start is None:
                continue
            view = self.cache.view(start)
            if is_valid_checkpoint(cp, view):
                self._advance(RecoveryPhase.REPLAYING)
                self.resume_at = replay_positions(cp, view)
                cursor, deliveries = install_and_replay(cp, view, self.host.app, self.host.m)
                self.installed = cp
                self._advance(RecoveryPhase.LIVE)
                self.host.go_live(cursor, deliveries)
                return
        self.host.after(self.poll_interval, self._poll)


class LogTailRecovery:
    """Install the newest checkpoint, then fetch the log tail from acceptors.

    ``host`` additionally supplies ``fetch(group, first, last)`` and delivers
    replies through :meth:`on_fetched`.
    """

    def __init__(self, host, rings, chunk: int = 50, window: int = 4, retry: float = 0.5):
        self.host = host
        self.rings = normalize_groups(rings)
        self.chunk = chunk
        self.window = window
        self.retry = retry
        self.phase = RecoveryPhase.FETCHING_CHECKPOINT
        self.cursor: Optional[MergeCursor] = None
        self.buffer: dict[GroupId, dict[int, Value]] = {g: {} for g in self.rings}
        self.live_first: dict[GroupId, Optional[int]] = {g: None for g in self.rings}
        self.requested: dict[GroupId, int] = {}
        self.outstanding: dict[GroupId, int] = {g: 0 for g in self.rings}
        self.fetches = 0
        self.installed: Optional[Checkpoint] = None
        self.deliveries: list = []
        self.failed: Optional[Exception] = None
        self.resume_at: dict = {}

    def start(self) -> None:
        self.host.load_checkpoints(self.rings, self._on_checkpoints)

    def on_decision(self, group: GroupId, instance: int, value: Value) -> None:
        if self.phase == RecoveryPhase.LIVE:
            return
        if self.live_first[group] is None:
            self.live_first[group] = instance
        self.buffer[group][instance] = value
        self._drain(group)

    def on_fetched(self, group: GroupId, instance: int, value: Optional[Value], status: int) -> None:
        if self.phase != RecoveryPhase.REPLAYING:
            return
        self.outstanding[group] = max(0, self.outstanding[group] - 1)
        if value is None:
            if status == 1:
                self.failed = Trimmed(f"ring {group} instance {instance} trimmed")
                log.warning("log tail trimmed at ring %s instance %s", group, instance)
                self.phase = RecoveryPhase.FETCHING_CHECKPOINT
                self.cursor = None
                self.deliveries = []
                self.outstanding = {g: 0 for g in self.rings}
                self.host.after(self.retry, self.start)
            else:
                self.requested[group] = min(self.requested[group], instance - 1)
                self.host.after(self.retry, self._request, group)
            return
        self.buffer[group].setdefault(instance, value)
        self._drain(group)

    def _on_checkpoints(self, cps: list[Checkpoint]) -> None:
        if not self.host.alive or self.phase != RecoveryPhase.FETCHING_CHECKPOINT:
            return
        app = self.host.app
        if cps:
            cp = cps[0]
            app.restore(cp.state_blob)
            self.cursor = MergeCursor.resume(self.rings, self.host.m, cp.ring_slots, cp.positions)
            self.installed = cp
        else:
            app.restore(b"")
            self.cursor = MergeCursor(self.rings, self.host.m)
        self.resume_at = self.cursor.positions()
        self.phase = RecoveryPhase.REPLAYING
        for g in self.rings:
            self.requested[g] = self.cursor.next_instance[g] - 1
            self._drain(g)
        if self.phase == RecoveryPhase.REPLAYING:
            self.host.after(self.retry, self._watch, dict(self.cursor.next_instance))

    def _watch(self, before: dict) -> None:
        """Re-request ranges whose replies were lost, e.g. across a view change."""
        if self.phase != RecoveryPhase.REPLAYING or self.cursor is None or not self.host.alive:
            return
        now_at = dict(self.cursor.next_instance)
        for g in self.rings:
            if now_at[g] == before.get(g) and self.outstanding[g]:
                self.outstanding[g] = 0
                self.requested[g] = now_at[g] - 1
                self._request(g)
        self.host.after(self.retry, self._watch, now_at)

    def _drain(self, group: GroupId) -> None:
        cur = self.cursor
        if cur is None or self.phase != RecoveryPhase.REPLAYING:
            return
        buf = self.buffer[group]
        nxt = cur.next_instance[group]
        for stale in [i for i in buf if i < nxt]:
            del buf[stale]
        while nxt in buf:
            cur.enqueue_decision(group, nxt, buf.pop(nxt))
            nxt += 1
        for d in cur.try_deliver():
            self.host.app.apply(d)
            self.deliveries.append(d)
        self._request(group)
        if all(self._caught_up(g) for g in self.rings):
            self.phase = RecoveryPhase.LIVE
            self.host.go_live(cur, self.deliveries)

    def _caught_up(self, g: GroupId) -> bool:
        lf = self.live_first[g]
        return lf is not None and self.cursor.next_instance[g] >= lf

    def _request(self, group: GroupId) -> None:
        if self.phase != RecoveryPhase.REPLAYING or not self.host.alive:
            return
        lf = self.live_first[group]
        if lf is None:
            return
        while self.outstanding[group] < self.window * self.chunk:
            first = max(self.requested[group] + 1, self.cursor.next_instance[group])
            if first >= lf:
                return
            last = min(lf - 1, first + self.chunk - 1)
            self.requested[group] = last
            self.outstanding[group] += last - first + 1
            self.fetches += 1
            self.host.fetch(group, first, last)
