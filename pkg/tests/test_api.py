from __future__ import annotations

import threading

import pytest

from mrpaxos.api import SimBackend, sim_handle
from mrpaxos.cluster import SimCluster
from mrpaxos.core import (
    AtomicMulticast,
    Delivery,
    DeliveryBackend,
    MessageId,
    Value,
    unwrap,
    wrap,
)
from mrpaxos.errors import (
    AlreadySubscribed,
    NotConnected,
    PayloadTooLarge,
    SubscriptionClosed,
    SubscriptionMismatch,
    Timeout,
    UnknownGroup,
)
from mrpaxos.ring import RingConfig

ACC = ["proposer", "acceptor"]


class Loopback(DeliveryBackend):
    """Delivers every multicast straight back, one ring at a time."""

    def __init__(self, groups=(1, 2)):
        self._groups = set(groups)
        self.up = True
        self.sub = None
        self.seq = 0

    def groups(self):
        return self._groups

    def connected(self):
        return self.up

    def submit(self, group, payload):
        mid = MessageId(7, self.seq)
        if self.sub is not None:
            self.sub.push(Delivery(group, self.seq, self.seq, payload, mid))
        self.seq += 1
        return mid

    def attach(self, sub):
        self.sub = sub


def test_value_invariants():
    assert Value.app([b"a", b"bc"]).slots == 2
    assert Value.skip(600).slots == 600
    assert Value.skip(3) == Value.skip(3) and Value.skip(3) != Value.skip(4)
    for bad in (lambda: Value.app([]), lambda: Value.skip(0)):
        with pytest.raises(ValueError):
            bad()


def test_envelope_roundtrip():
    mid = MessageId(5, 2**40)
    assert unwrap(wrap(mid, b"hello")) == (mid, b"hello")
    assert unwrap(b"short") == (None, b"short")


def test_handle_validates_before_submitting():
    be = Loopback()
    h = AtomicMulticast(be, max_message_size=8)
    with pytest.raises(PayloadTooLarge):
        h.multicast(1, b"")
    with pytest.raises(PayloadTooLarge):
        h.multicast(1, b"x" * 9)
    with pytest.raises(UnknownGroup):
        h.multicast(3, b"x")
    be.up = False
    with pytest.raises(NotConnected):
        h.multicast(1, b"x")
    assert be.seq == 0


def test_subscribe_rules_and_delivery():
    h = AtomicMulticast(Loopback())
    with pytest.raises(UnknownGroup):
        h.subscribe([])
    with pytest.raises(UnknownGroup):
        h.subscribe([1, 9])
    sub = h.subscribe([2, 1, 2])
    assert sub.groups == (1, 2)
    with pytest.raises(AlreadySubscribed):
        h.subscribe([1])
    h.multicast(2, b"p")
    d = h.next_delivery(sub, 0.01)
    assert (d.group, d.payload) == (2, b"p")
    with pytest.raises(Timeout):
        h.next_delivery(sub, 0.01)
    h.multicast(1, b"q")
    sub.close()
    # queued deliveries drain before the closed error
    assert h.next_delivery(sub, 0.01).payload == b"q"
    with pytest.raises(SubscriptionClosed):
        h.next_delivery(sub, 0.01)


def test_blocking_wait_wakes_on_push():
    be = Loopback()
    h = AtomicMulticast(be)
    sub = h.subscribe([1])
    threading.Timer(0.05, be.submit, (1, b"late")).start()
    assert h.next_delivery(sub, 5.0).payload == b"late"


def small_cluster(seed=0):
    cl = SimCluster(seed, groups=(1, 2))
    cfg = RingConfig(lam=1000.0, delta_t=0.005)
    for g in (1, 2):
        for k in range(3):
            cl.add_node(10 * g + k, ACC, [g], ring_cfg=cfg)
    cl.add_node(100, ["learner"], [1, 2], ring_cfg=cfg)
    cl.add_node(101, ["learner"], [1], ring_cfg=cfg)
    cl.add_client(200, [1, 2], payload=lambda: b"", stop=0.0)
    return cl


def test_sim_backend_end_to_end():
    cl = small_cluster()
    h = sim_handle(cl, learner=100, client=200)
    sub = h.subscribe([1, 2])
    sent = [h.multicast(1 + i % 2, b"m%d" % i) for i in range(6)]
    got = [h.next_delivery(sub, 1.0) for _ in range(6)]
    assert sorted(d.payload for d in got) == sorted(b"m%d" % i for i in range(6))
    assert sorted(d.message_id for d in got) == sorted(sent)
    slots = [d.global_slot for d in got]
    assert slots == sorted(slots)
    with pytest.raises(Timeout):
        h.next_delivery(sub, 0.05)


def test_sim_backend_rejects_other_subscription():
    cl = small_cluster()
    h = AtomicMulticast(SimBackend(cl, learner=101, client=200))
    with pytest.raises(SubscriptionMismatch):
        h.subscribe([1, 2])


def test_sim_backend_connected_follows_client():
    cl = small_cluster()
    be = SimBackend(cl, learner=100, client=200)
    assert be.connected()
    cl.crash(200)
    assert not be.connected()
