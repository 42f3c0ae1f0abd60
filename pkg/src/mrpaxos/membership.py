"""Ring topology views and the embedded membership registry.

Ring order is registration order.  Successor links follow that order and the
last member closes the ring back to the first.  The coordinator of a ring is
its first live acceptor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .core import GroupId, NodeId
from .errors import DuplicateNode, NoLiveAcceptor, UnknownGroup

log = logging.getLogger(__name__)

PROPOSER = "proposer"
ACCEPTOR = "acceptor"
LEARNER = "learner"
CLIENT = "client"
ROLES = frozenset({PROPOSER, ACCEPTOR, LEARNER})


@dataclass(frozen=True)
class Member:
    node: NodeId
    roles: frozenset

    @property
    def is_acceptor(self) -> bool:
        return ACCEPTOR in self.roles

    @property
    def is_learner(self) -> bool:
        return LEARNER in self.roles


@dataclass(frozen=True)
class TopologyView:
    epoch: int
    rings: Mapping[GroupId, tuple[Member, ...]]
    # static per-ring quorum, fixed by the configured acceptor count
    quorum: Mapping[GroupId, int] = field(default_factory=dict)
    addresses: Mapping[NodeId, str] = field(default_factory=dict)
    t_ref: Optional[float] = None

    def members(self, group: GroupId) -> tuple[Member, ...]:
        try:
            return self.rings[group]
        except KeyError:
            raise UnknownGroup(group) from None

    def nodes(self, group: GroupId) -> list[NodeId]:
        return [m.node for m in self.members(group)]

    def contains(self, group: GroupId, node: NodeId) -> bool:
        return any(m.node == node for m in self.rings.get(group, ()))

    def roles_of(self, group: GroupId, node: NodeId) -> frozenset:
        for m in self.rings.get(group, ()):
            if m.node == node:
                return m.roles
        return frozenset()

    def acceptors(self, group: GroupId) -> list[NodeId]:
        return [m.node for m in self.members(group) if m.is_acceptor]

    def learners(self, group: GroupId) -> list[NodeId]:
        return [m.node for m in self.members(group) if m.is_learner]

    def successor(self, group: GroupId, node: NodeId) -> Optional[NodeId]:
        order = self.nodes(group)
        try:
            i = order.index(node)
        except ValueError:
            return None
        return order[(i + 1) % len(order)]

    def coordinator(self, group: GroupId) -> NodeId:
        return elect_coordinator(self, group)

    def quorum_of(self, group: GroupId) -> int:
        q = self.quorum.get(group)
        if q is None:
            q = len(self.acceptors(group)) // 2 + 1
        return q

    def groups_of(self, node: NodeId) -> list[GroupId]:
        return sorted(g for g in self.rings if self.contains(g, node))

    def all_nodes(self) -> set[NodeId]:
        return {m.node for ms in self.rings.values() for m in ms}

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "rings": {str(g): [[m.node, sorted(m.roles)] for m in ms] for g, ms in self.rings.items()},
            "quorum": {str(g): q for g, q in self.quorum.items()},
            "addresses": {str(n): a for n, a in self.addresses.items()},
            "t_ref": self.t_ref,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TopologyView":
        rings = {
            int(g): tuple(Member(int(n), frozenset(r)) for n, r in ms)
            for g, ms in d.get("rings", {}).items()
        }
        quorum = {int(g): int(q) for g, q in d.get("quorum", {}).items()}
        addresses = {int(n): a for n, a in d.get("addresses", {}).items()}
        t_ref = d.get("t_ref")
        return cls(int(d["epoch"]), rings, quorum, addresses, None if t_ref is None else float(t_ref))


def elect_coordinator(view: TopologyView, group: GroupId,
                      failed: Iterable[NodeId] = ()) -> NodeId:
    """First acceptor in ring order that is not in ``failed``."""
    failed = set(failed)
    for m in view.members(group):
        if m.is_acceptor and m.node not in failed:
            return m.node
    raise NoLiveAcceptor(f"ring {group} has no live acceptor")


def ring_is_cyclic(view: TopologyView, group: GroupId) -> bool:
    """Successor links form one cycle through every member exactly once."""
    order = view.nodes(group)
    if len(set(order)) != len(order):
        return False
    if not order:
        return True
    seen = set()
    cur = order[0]
    while cur not in seen:
        seen.add(cur)
        cur = view.successor(group, cur)
    return cur == order[0] and seen == set(order)


@dataclass
class _Registration:
    node: NodeId
    roles: frozenset
    rings: tuple[GroupId, ...]
    address: str = ""
    last_heartbeat: float = 0.0
    incarnation: int = 0


class Registry:
    """Single logical membership service.

    Transport agnostic: callers feed it registrations, heartbeats and clock
    checks, and publish the views it returns.
    """

    def __init__(self, groups: Iterable[GroupId], suspicion_timeout: float = 0.2,
                 quorum: Optional[Mapping[GroupId, int]] = None, t_ref: Optional[float] = None):
        self.groups = sorted(set(groups))
        self.t_ref = t_ref
        self.suspicion_timeout = suspicion_timeout
        self.static_quorum = dict(quorum or {})
        self.epoch = 0
        self.order: dict[GroupId, list[NodeId]] = {g: [] for g in self.groups}
        self.registered: dict[NodeId, _Registration] = {}
        # highest acceptor count ever registered per ring, for the quorum
        self.acceptor_high: dict[GroupId, int] = {g: 0 for g in self.groups}
        self.clients: set[NodeId] = set()
        self.suspected: list[tuple[float, NodeId]] = []

    def register(self, node: NodeId, roles: Iterable[str], rings: Iterable[GroupId],
                 now: float = 0.0, address: str = "", incarnation: int = 0) -> TopologyView:
        if node in self.registered or node in self.clients:
            raise DuplicateNode(node)
        roles = frozenset(roles)
        rings = tuple(sorted(set(rings)))
        if CLIENT in roles:
            self.clients.add(node)
            self.registered[node] = _Registration(node, roles, (), address, now, incarnation)
            # the address book is part of the view, so learners can reach the client
            self.epoch += 1
            return self.view()
        for g in rings:
            if g not in self.order:
                raise UnknownGroup(g)
        self.registered[node] = _Registration(node, roles, rings, address, now, incarnation)
        for g in rings:
            self.order[g].append(node)
            if ACCEPTOR in roles:
                count = sum(1 for n in self.order[g] if ACCEPTOR in self.registered[n].roles)
                self.acceptor_high[g] = max(self.acceptor_high[g], count)
        self.epoch += 1
        log.debug("registered node %s roles %s rings %s -> epoch %d", node, sorted(roles), rings, self.epoch)
        return self.view()

    def heartbeat(self, node: NodeId, now: float, incarnation: Optional[int] = None) -> bool:
        """Record a heartbeat; False if the node is not (or no longer) registered.

        A heartbeat from a different incarnation than the registered one does
        not count: a restarted process must not keep its old registration alive.
        """
        reg = self.registered.get(node)
        if reg is None:
            return False
        if incarnation is not None and incarnation != reg.incarnation:
            return False
        reg.last_heartbeat = max(reg.last_heartbeat, now)
        return True

    def remove(self, node: NodeId, now: float = 0.0) -> Optional[TopologyView]:
        reg = self.registered.pop(node, None)
        if reg is None:
            return None
        if node in self.clients:
            self.clients.discard(node)
            return None
        for g in reg.rings:
            self.order[g].remove(node)
        self.epoch += 1
        self.suspected.append((now, node))
        return self.view()

    def check(self, now: float) -> Optional[TopologyView]:
        """Drop members silent for longer than the suspicion timeout."""
        late = [
            n for n, r in self.registered.items()
            if n not in self.clients and now - r.last_heartbeat > self.suspicion_timeout
        ]
        if not late:
            return None
        for n in sorted(late):
            log.info("suspecting node %s at %.3f", n, now)
            self.remove(n, now)
        return self.view()

    def quorum(self, group: GroupId) -> int:
        if group in self.static_quorum:
            return self.static_quorum[group]
        return max(1, self.acceptor_high[group]) // 2 + 1

    def view(self) -> TopologyView:
        rings = {
            g: tuple(Member(n, self.registered[n].roles) for n in self.order[g])
            for g in self.groups
        }
        quorum = {g: self.quorum(g) for g in self.groups}
        addresses = {n: r.address for n, r in self.registered.items() if r.address}
        return TopologyView(self.epoch, rings, quorum, addresses, self.t_ref)

    def members_to_notify(self) -> list[NodeId]:
        return sorted(self.registered)
