"""Run trace: everything the oracles and metrics need from one execution."""
from __future__ import annotations

import hashlib
import struct
from collections import defaultdict
from typing import Callable, Optional

from .core import MessageId, Value


class Trace:
    def __init__(self, clock: Callable[[], float]):
        self._clock = clock
        self.submitted: dict[MessageId, tuple[float, int]] = {}
        self.resubmits = 0
        # learner -> [(t, group, instance, global_slot, message_id, nbytes)]
        self.deliveries: dict[int, list] = defaultdict(list)
        self.replies: dict[MessageId, float] = {}
        self.decisions: dict[tuple[int, int], Value] = {}
        self.conflicts: list = []
        self.events: list[tuple[float, str, str]] = []
        self.fetches: dict[int, int] = defaultdict(int)
        self.recovery_fetches: dict[int, int] = defaultdict(int)
        self.fetch_served: dict[int, int] = defaultdict(int)
        self.state_hashes: dict[int, str] = {}
        self.checkpoints: dict[int, list] = defaultdict(list)
        self.crashed: set[int] = set()
        self.recovered: set[int] = set()
        # learner -> {group: (instance, offset)} where a recovered learner resumed
        self.resumed: dict[int, dict] = {}
        self.restarted_at: dict[int, float] = {}

    def now(self) -> float:
        return self._clock()

    def event(self, kind: str, detail: str = "") -> None:
        self.events.append((self._clock(), kind, detail))

    def submit(self, mid: MessageId, group: int, resubmit: bool = False) -> None:
        if resubmit:
            self.resubmits += 1
        else:
            self.submitted[mid] = (self._clock(), group)

    def reply(self, mid: MessageId) -> None:
        if mid not in self.replies:
            self.replies[mid] = self._clock()

    def decided(self, group: int, instance: int, value: Value) -> None:
        key = (group, instance)
        prev = self.decisions.get(key)
        if prev is None:
            self.decisions[key] = value
        elif prev is not value and prev != value:
            self.conflicts.append((self._clock(), group, instance))

    def conflict(self, group: int, instance: int, node: int) -> None:
        self.conflicts.append((self._clock(), group, instance, node))

    def deliver(self, learner: int, t: float, group: int, instance: int, gslot: int,
                mid: Optional[MessageId], nbytes: int = 0) -> None:
        self.deliveries[learner].append((t, group, instance, gslot, mid, nbytes))

    def digest(self) -> str:
        """Hash of every delivery and event, in a fixed order."""
        h = hashlib.sha256()
        pack = struct.pack
        for learner in sorted(self.deliveries):
            h.update(pack(">I", learner))
            for t, g, inst, gslot, mid, _ in self.deliveries[learner]:
                c, s = mid if mid is not None else (0xFFFFFFFF, 0)
                h.update(pack(">dHQQIQ", t, g, inst, gslot, c, s))
        for t, kind, detail in self.events:
            h.update(f"{t!r}|{kind}|{detail}\n".encode())
        for n in sorted(self.state_hashes):
            h.update(f"{n}:{self.state_hashes[n]}\n".encode())
        return h.hexdigest()
