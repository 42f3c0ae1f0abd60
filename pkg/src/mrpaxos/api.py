"""Backends that connect an :class:`~mrpaxos.core.AtomicMulticast` handle to a deployment."""
from __future__ import annotations

from .core import AtomicMulticast, DeliveryBackend, MessageId, Subscription
from .errors import SubscriptionMismatch


class SimBackend(DeliveryBackend):
    """Multicast through a simulated client and learn at a simulated learner.

    Waiting advances virtual time in ``step`` increments instead of blocking,
    so a caller can drive a whole simulation through the public API.
    """

    def __init__(self, cluster, learner: int, client: int, step: float = 0.001):
        self.cluster = cluster
        self.learner = learner
        self.client = client
        self.step = step

    def groups(self) -> set:
        return set(self.cluster.groups)

    def connected(self) -> bool:
        c = self.cluster.clients.get(self.client)
        return c is not None and c.alive

    def submit(self, group: int, payload: bytes) -> MessageId:
        if not self.cluster.started:
            self.cluster.start()
        return self.cluster.clients[self.client].submit(group, payload)

    def attach(self, sub: Subscription) -> None:
        node = self.cluster.nodes[self.learner]
        if tuple(sub.groups) != node.rings:
            # a simulated learner's rings are fixed when the node is declared
            raise SubscriptionMismatch(f"learner {self.learner} subscribes to {node.rings}, not {sub.groups}")
        node.subscription = sub

    def wait(self, sub: Subscription, timeout: float) -> None:
        cluster = self.cluster
        if not cluster.started:
            cluster.start()
        end = cluster.now() + timeout
        while not sub.queue and not sub.closed and cluster.now() < end:
            cluster.run(min(end, cluster.now() + self.step))


def sim_handle(cluster, learner: int, client: int, **kw) -> AtomicMulticast:
    return AtomicMulticast(SimBackend(cluster, learner, client), **kw)
