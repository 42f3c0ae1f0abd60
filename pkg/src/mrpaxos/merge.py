"""Deterministic round-robin merge of per-ring decision streams.

Rings are visited in ascending group order, ``M`` slots per ring per turn.
An App batch of ``n`` payloads occupies ``n`` slots and a ``Skip(n)`` value
occupies ``n`` slots that are consumed silently.  A cursor stops as soon as
the ring whose turn it is has nothing pending.
"""
from __future__ import annotations

from collections import deque
from typing import Iterable, Mapping, Optional

from .core import SKIP, Delivery, GroupId, Value, normalize_groups
from .errors import OutOfOrderInstance


def global_slot(ring_index: int, ring_slot: int, k: int, m: int) -> int:
    """Position of ``ring_slot`` of the ``ring_index``-th ring in the merged stream."""
    if ring_index < 0 or ring_slot < 0 or ring_index >= k or m < 1:
        raise ValueError("need 0 <= ring_index < k, ring_slot >= 0, M >= 1")
    return (ring_slot // m) * (k * m) + ring_index * m + (ring_slot % m)


def ring_position(gslot: int, k: int, m: int) -> tuple[int, int]:
    """Inverse of :func:`global_slot`: (ring_index, ring_slot)."""
    rnd, rest = divmod(gslot, k * m)
    idx, off = divmod(rest, m)
    return idx, rnd * m + off


def consumed_at(gslot: int, k: int, m: int) -> list[int]:
    """Per-ring consumed slot counts once ``gslot`` merged slots are consumed."""
    rnd, rest = divmod(gslot, k * m)
    return [rnd * m + min(max(rest - i * m, 0), m) for i in range(k)]


class SlotMap:
    def __init__(self, k: int, m: int = 1):
        self.k = k
        self.m = m

    def global_slot(self, ring_index: int, ring_slot: int) -> int:
        return global_slot(ring_index, ring_slot, self.k, self.m)

    def ring_position(self, gslot: int) -> tuple[int, int]:
        return ring_position(gslot, self.k, self.m)


class _Entry:
    __slots__ = ("instance", "value", "offset")

    def __init__(self, instance: int, value: Value, offset: int = 0):
        self.instance = instance
        self.value = value
        self.offset = offset

    @property
    def remaining(self) -> int:
        return self.value.slots - self.offset


class MergeCursor:
    """Merge state of one learner subscription."""

    def __init__(self, rings: Iterable[GroupId], m: int = 1):
        self.rings = normalize_groups(rings)
        if not self.rings:
            raise ValueError("a merge needs at least one ring")
        if m < 1:
            raise ValueError("M must be >= 1")
        self.m = m
        self.k = len(self.rings)
        self.consumed_slots = {g: 0 for g in self.rings}
        self.enqueued_slots = {g: 0 for g in self.rings}
        self.next_instance = {g: 0 for g in self.rings}
        self.pending: dict[GroupId, deque] = {g: deque() for g in self.rings}
        self.next_global_slot = 0
        self._start_offset: dict[GroupId, int] = {}

    @classmethod
    def resume(
        cls,
        rings: Iterable[GroupId],
        m: int,
        consumed_slots: Mapping[GroupId, int],
        positions: Mapping[GroupId, tuple[int, int]],
    ) -> "MergeCursor":
        """Cursor restarted at a checkpointed position.

        ``positions[g]`` is ``(instance, offset)``: the first instance of ring
        ``g`` not fully consumed and how many of its slots already were.
        """
        cur = cls(rings, m)
        if set(consumed_slots) != set(cur.rings) or set(positions) != set(cur.rings):
            raise ValueError("checkpoint rings do not match the subscription")
        for g in cur.rings:
            cur.consumed_slots[g] = consumed_slots[g]
            cur.enqueued_slots[g] = consumed_slots[g]
            inst, off = positions[g]
            cur.next_instance[g] = inst
            if off:
                cur._start_offset[g] = off
        cur.next_global_slot = sum(cur.consumed_slots.values())
        expected = consumed_at(cur.next_global_slot, cur.k, m)
        if [cur.consumed_slots[g] for g in cur.rings] != expected:
            raise ValueError("consumed slot counts are not a round-robin boundary")
        return cur

    def positions(self) -> dict[GroupId, tuple[int, int]]:
        out = {}
        for g in self.rings:
            q = self.pending[g]
            if q:
                out[g] = (q[0].instance, q[0].offset)
            else:
                out[g] = (self.next_instance[g], self._start_offset.get(g, 0))
        return out

    def pending_slots(self, group: GroupId) -> int:
        return sum(e.remaining for e in self.pending[group])

    def enqueue_decision(self, group: GroupId, instance: int, value: Value) -> None:
        expected = self.next_instance[group]
        if instance != expected:
            raise OutOfOrderInstance(f"ring {group}: got instance {instance}, expected {expected}")
        offset = self._start_offset.pop(group, 0)
        if offset >= value.slots:
            raise ValueError("resume offset beyond the value's slots")
        self.pending[group].append(_Entry(instance, value, offset))
        self.enqueued_slots[group] += value.slots - offset
        self.next_instance[group] = instance + 1

    def try_deliver(self, limit: Optional[int] = None) -> list[Delivery]:
        """Consume every slot that is deliverable now."""
        out: list[Delivery] = []
        rings = self.rings
        k, m = self.k, self.m
        pending = self.pending
        consumed = self.consumed_slots
        while True:
            g_slot = self.next_global_slot
            if g_slot % (k * m) == 0 and k > 1:
                self._skip_full_rounds()
                g_slot = self.next_global_slot
            idx = (g_slot // m) % k
            ring = rings[idx]
            q = pending[ring]
            if not q:
                break
            head = q[0]
            room = m - (g_slot % m)
            if head.value.kind == SKIP:
                take = min(room, head.remaining)
                head.offset += take
                consumed[ring] += take
                self.next_global_slot = g_slot + take
            else:
                payload = head.value.payloads[head.offset]
                out.append(Delivery(ring, head.instance, g_slot, payload))
                head.offset += 1
                consumed[ring] += 1
                self.next_global_slot = g_slot + 1
            if head.offset >= head.value.slots:
                q.popleft()
            if limit is not None and len(out) >= limit:
                break
        return out

    def _skip_full_rounds(self) -> None:
        # Fast path: when every ring's head is a skip, whole rounds can be
        # consumed at once without changing the outcome.
        rounds = None
        for g in self.rings:
            q = self.pending[g]
            if not q or q[0].value.kind != SKIP:
                return
            r = q[0].remaining // self.m
            if rounds is None or r < rounds:
                rounds = r
            if rounds == 0:
                return
        take = rounds * self.m
        for g in self.rings:
            head = self.pending[g][0]
            head.offset += take
            self.consumed_slots[g] += take
            if head.offset >= head.value.slots:
                self.pending[g].popleft()
        self.next_global_slot += take * self.k

    def blocked_on(self) -> Optional[GroupId]:
        """Ring whose turn it is, if it has nothing pending."""
        ring = self.rings[(self.next_global_slot // self.m) % self.k]
        return None if self.pending[ring] else ring

    def __repr__(self):
        return (
            f"MergeCursor(rings={self.rings}, M={self.m}, "
            f"next_global_slot={self.next_global_slot}, consumed={self.consumed_slots})"
        )
