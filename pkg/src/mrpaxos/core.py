"""Vocabulary types and the public atomic multicast API.

A group is a ring; a learner subscribes to a set of groups and receives a
single merged stream of :class:`Delivery` objects.  The API object here is
transport agnostic: the simulated cluster and the TCP node both plug into it
through :class:`DeliveryBackend`.
"""
from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .errors import (
    AlreadySubscribed,
    ConcurrentConsumer,
    NotConnected,
    PayloadTooLarge,
    SubscriptionClosed,
    Timeout,
    UnknownGroup,
)

GroupId = int
NodeId = int

MAX_MESSAGE_SIZE = 32768

APP = 1
SKIP = 2


class MessageId(NamedTuple):
    client: int
    seq: int


class Ballot(NamedTuple):
    """Paxos ballot, ordered lexicographically by (round, node)."""

    round: int
    node: int


ZERO_BALLOT = Ballot(0, 0)


class Value:
    """A consensus value: either a batch of application payloads or a skip count."""

    __slots__ = ("kind", "payloads", "skip_count")

    def __init__(self, kind: int, payloads: tuple = (), skip_count: int = 0):
        if kind == APP:
            if not payloads or skip_count:
                raise ValueError("App value needs >= 1 payload and no skip count")
        elif kind == SKIP:
            if skip_count < 1 or payloads:
                raise ValueError("Skip value needs skip_count >= 1 and no payloads")
        else:
            raise ValueError(f"unknown value kind {kind}")
        self.kind = kind
        self.payloads = tuple(payloads)
        self.skip_count = skip_count

    @classmethod
    def app(cls, payloads: Iterable[bytes]) -> "Value":
        return cls(APP, tuple(bytes(p) for p in payloads))

    @classmethod
    def skip(cls, count: int) -> "Value":
        return cls(SKIP, (), int(count))

    @property
    def is_skip(self) -> bool:
        return self.kind == SKIP

    @property
    def slots(self) -> int:
        """Merge slots this value occupies."""
        return self.skip_count if self.kind == SKIP else len(self.payloads)

    @property
    def nbytes(self) -> int:
        if self.kind == SKIP:
            return 8
        return 2 + sum(4 + len(p) for p in self.payloads)

    def __eq__(self, other):
        if not isinstance(other, Value):
            return NotImplemented
        return (self.kind, self.payloads, self.skip_count) == (
            other.kind,
            other.payloads,
            other.skip_count,
        )

    def __hash__(self):
        return hash((self.kind, self.payloads, self.skip_count))

    def __repr__(self):
        if self.kind == SKIP:
            return f"Skip({self.skip_count})"
        return f"App(n={len(self.payloads)})"


class Decision(NamedTuple):
    group: GroupId
    instance: int
    value: Value


@dataclass(frozen=True)
class Delivery:
    group: GroupId
    ring_instance: int
    global_slot: int
    payload: bytes
    message_id: Optional[MessageId] = None


def check_payload(payload: bytes, max_size: int = MAX_MESSAGE_SIZE) -> bytes:
    n = len(payload)
    if n < 1 or n > max_size:
        raise PayloadTooLarge(f"payload length {n} outside [1, {max_size}]")
    return bytes(payload)


# Client payloads travel wrapped in a 12-byte (client, seq) header so that
# learners can attribute deliveries and route replies.
_ENVELOPE = struct.Struct(">IQ")
ENVELOPE_SIZE = _ENVELOPE.size


def wrap(mid: MessageId, payload: bytes) -> bytes:
    return _ENVELOPE.pack(mid.client, mid.seq) + payload


def unwrap(data: bytes) -> tuple[Optional[MessageId], bytes]:
    if len(data) < ENVELOPE_SIZE:
        return None, data
    client, seq = _ENVELOPE.unpack_from(data)
    return MessageId(client, seq), data[ENVELOPE_SIZE:]


def normalize_groups(groups: Iterable[GroupId]) -> tuple[GroupId, ...]:
    """Subscription order is ascending group id everywhere."""
    return tuple(sorted(set(groups)))


class Subscription:
    """Single-consumer handle on a learner's merged delivery stream."""

    def __init__(self, groups: Iterable[GroupId], cursor=None):
        self.groups = normalize_groups(groups)
        self.cursor = cursor
        self.queue: deque[Delivery] = deque()
        self.closed = False
        self._consumer = threading.Lock()
        self._ready = threading.Condition()

    def push(self, delivery: Delivery) -> None:
        with self._ready:
            self.queue.append(delivery)
            self._ready.notify()

    def close(self) -> None:
        with self._ready:
            self.closed = True
            self._ready.notify_all()

    def __repr__(self):
        return f"Subscription(groups={self.groups}, queued={len(self.queue)})"


class DeliveryBackend:
    """What an :class:`AtomicMulticast` handle needs from a deployment."""

    def groups(self) -> set[GroupId]:
        raise NotImplementedError

    def connected(self) -> bool:
        return True

    def submit(self, group: GroupId, payload: bytes) -> MessageId:
        raise NotImplementedError

    def attach(self, sub: Subscription) -> None:
        """Route this learner's merged deliveries into ``sub``."""
        raise NotImplementedError

    def wait(self, sub: Subscription, timeout: float) -> None:
        """Block (or advance virtual time) until ``sub`` has input or timeout."""
        with sub._ready:
            if not sub.queue and not sub.closed:
                sub._ready.wait(timeout)


@dataclass
class AtomicMulticast:
    """multicast / subscribe / next_delivery over a pluggable backend."""

    backend: DeliveryBackend
    max_message_size: int = MAX_MESSAGE_SIZE
    _subscription: Optional[Subscription] = field(default=None, init=False)

    def multicast(self, group: GroupId, payload: bytes) -> MessageId:
        payload = check_payload(payload, self.max_message_size)
        if group not in self.backend.groups():
            raise UnknownGroup(group)
        if not self.backend.connected():
            raise NotConnected("transport down")
        return self.backend.submit(group, payload)

    def subscribe(self, groups: Iterable[GroupId]) -> Subscription:
        groups = normalize_groups(groups)
        if not groups:
            raise UnknownGroup("empty subscription")
        known = self.backend.groups()
        missing = [g for g in groups if g not in known]
        if missing:
            raise UnknownGroup(missing)
        if self._subscription is not None:
            raise AlreadySubscribed(self._subscription.groups)
        sub = Subscription(groups)
        self.backend.attach(sub)
        self._subscription = sub
        return sub

    def next_delivery(self, sub: Subscription, timeout: float) -> Delivery:
        if not sub._consumer.acquire(blocking=False):
            raise ConcurrentConsumer("next_delivery called concurrently")
        try:
            if sub.closed and not sub.queue:
                raise SubscriptionClosed(sub.groups)
            if not sub.queue:
                self.backend.wait(sub, timeout)
            with sub._ready:
                if sub.queue:
                    return sub.queue.popleft()
            if sub.closed:
                raise SubscriptionClosed(sub.groups)
            raise Timeout(f"no delivery within {timeout}s")
        finally:
            sub._consumer.release()
