"""Simulated deployment: network, registry process, nodes, clients, faults."""
from __future__ import annotations

import logging
from typing import Callable, Optional

from . import wire
from .errors import DuplicateNode, MRPError
from .membership import CLIENT, Registry, TopologyView
from .node import CpuModel, NodeConfig, Process, SimClient
from .recovery import MemoryStore
from .ring import RingConfig
from .sim import Constant, SimNetwork, Simulator
from .trace import Trace
from .wire import Frame

log = logging.getLogger(__name__)

REGISTRY_ID = 0


class SimRegistry:
    """The membership registry as a node on the simulated network."""

    def __init__(self, cluster: "SimCluster", registry: Registry, check_interval: float):
        self.cluster = cluster
        self.registry = registry
        self.check_interval = check_interval
        self.alive = True
        self.incarnation = 0
        self.last_view: Optional[TopologyView] = None

    def start(self) -> None:
        self.cluster.sim.every(self.check_interval, self._check)

    def _check(self) -> None:
        view = self.registry.check(self.cluster.sim.now)
        if view is not None:
            removed = [n for _, n in self.registry.suspected if n not in self.registry.registered]
            self.publish(view, extra=removed)

    def publish(self, view: TopologyView, extra=()) -> None:
        self.last_view = view
        self.cluster.trace.event("view", f"epoch={view.epoch} " + " ".join(
            f"r{g}=" + ",".join(str(m.node) for m in ms) for g, ms in sorted(view.rings.items())))
        frame = wire.json_frame(wire.VIEW, view.to_json(), instance=view.epoch)
        targets = set(self.registry.members_to_notify()) | set(extra)
        for n in sorted(targets):
            self.cluster.net.send(REGISTRY_ID, n, frame)

    def receive(self, src: int, frame: Frame) -> None:
        now = self.cluster.sim.now
        if frame.kind == wire.HEARTBEAT:
            if not self.registry.heartbeat(src, now, frame.instance):
                if src not in self.registry.registered and self.last_view is not None:
                    # tell a silently dropped node that it is out
                    self.cluster.net.send(REGISTRY_ID, src, wire.json_frame(
                        wire.VIEW, self.last_view.to_json(), instance=self.last_view.epoch))
            return
        if frame.kind == wire.REGISTER:
            body = wire.json_body(frame)
            try:
                view = self.registry.register(body["node"], body["roles"], body["rings"], now,
                                              address=body.get("address", ""),
                                              incarnation=body.get("incarnation", 0))
            except DuplicateNode:
                self.cluster.net.send(REGISTRY_ID, src, Frame(wire.REGISTER_REJECT, 0, instance=body["node"]))
                return
            self.cluster.trace.event("register", f"node={body['node']} roles={','.join(body['roles'])}")
            self.publish(view)


class SimCluster:
    """Environment for :class:`Process` objects on a simulated network."""

    registry_id = REGISTRY_ID

    def __init__(self, seed: int = 0, groups=(1,), *, default_latency=Constant(0.0001),
                 rto: float = 0.01, suspicion_timeout: float = 0.2, check_interval: float = 0.05,
                 quorum: Optional[dict] = None, codec_check: bool = False,
                 store_latency: float = 0.01, store_bandwidth: float = 100e6):
        self.sim = Simulator(seed)
        self.rng = self.sim.rng
        self.trace = Trace(lambda: self.sim.now)
        self.net = SimNetwork(self.sim, default_latency, rto, codec_check)
        self.net.audit = self._audit
        self.groups = sorted(set(groups))
        self.registry = Registry(self.groups, suspicion_timeout, quorum)
        self.registry_proc = SimRegistry(self, self.registry, check_interval)
        self.net.attach(REGISTRY_ID, self.registry_proc)
        self.store = MemoryStore()
        self.store_latency = store_latency
        self.store_bandwidth = store_bandwidth
        self.nodes: dict[int, Process] = {}
        self.clients: dict[int, SimClient] = {}
        self.started = False

    # -- environment interface --------------------------------------------

    def now(self) -> float:
        return self.sim.now

    def at(self, t: float, fn: Callable, *args) -> None:
        self.sim.at(t, fn, *args)

    def transmit(self, src: int, dst: int, frame: Frame, depart: Optional[float]) -> None:
        self.net.send(src, dst, frame, depart)

    def store_delay(self, nbytes: int) -> float:
        return self.store_latency + nbytes / self.store_bandwidth

    def _audit(self, src: int, dst: int, frame: Frame) -> bool:
        node = self.nodes.get(src)
        if node is None:
            return False
        m = node.members.get(frame.group)
        return m is not None and m.successor == dst

    # -- building ---------------------------------------------------------

    def add_node(self, nid: int, roles, rings, *, region=None, ring_cfg: Optional[RingConfig] = None,
                 ring_cfgs: Optional[dict] = None, cpu: Optional[CpuModel] = None,
                 cfg: Optional[NodeConfig] = None, app_factory=None, skew: float = 0.0) -> Process:
        if nid in self.nodes or nid in self.clients or nid == REGISTRY_ID:
            raise DuplicateNode(nid)
        p = Process(self, nid, roles, rings, ring_cfg=ring_cfg, ring_cfgs=ring_cfgs, cpu=cpu,
                    cfg=cfg, app_factory=app_factory, skew=skew, region=region)
        self.nodes[nid] = p
        self.net.attach(nid, p, region)
        return p

    def add_client(self, cid: int, groups, *, region=None, **kw) -> SimClient:
        if cid in self.nodes or cid in self.clients or cid == REGISTRY_ID:
            raise DuplicateNode(cid)
        c = SimClient(self, cid, groups, region=region, **kw)
        self.clients[cid] = c
        self.net.attach(cid, c, region)
        return c

    def start(self) -> TopologyView:
        """Register everything in declaration order and hand out the first view."""
        now = self.sim.now
        for nid, p in self.nodes.items():
            self.registry.register(nid, p.roles, p.rings, now, incarnation=p.incarnation)
        for cid in self.clients:
            self.registry.register(cid, {CLIENT}, (), now)
        view = self.registry.view()
        self.registry_proc.last_view = view
        self.trace.event("view", f"epoch={view.epoch} bootstrap")
        for p in self.nodes.values():
            p.start(view, bootstrap=True)
        for c in self.clients.values():
            c.start(view)
        self.registry_proc.start()
        self.started = True
        return view

    # -- faults -----------------------------------------------------------

    def crash(self, nid: int) -> None:
        target = self.nodes.get(nid) or self.clients.get(nid)
        if target is None or not target.alive:
            return
        target.crash()
        self.net.crashed(nid, self.registry.suspicion_timeout)

    def restart(self, nid: int, protocol: str = "new") -> None:
        p = self.nodes[nid]
        if p.alive:
            return
        self.net.reset_links_of(nid)
        p.restart(protocol)

    def pause(self, nid: int, duration: float) -> None:
        p = self.nodes.get(nid)
        if p is not None and p.alive:
            p.pause(duration)

    def kill_region(self, region) -> list[int]:
        victims = [n for n in sorted(self.nodes) if self.nodes[n].region == region]
        victims += [c for c in sorted(self.clients) if self.clients[c].region == region]
        self.trace.event("kill-region", f"region={region} nodes={','.join(map(str, victims))}")
        for n in victims:
            self.crash(n)
        return victims

    # -- running ----------------------------------------------------------

    def run(self, until: float, max_events: Optional[int] = None) -> None:
        if not self.started:
            self.start()
        self.sim.run_until(until, max_events)

    def live_learners(self) -> list[Process]:
        return [p for n, p in sorted(self.nodes.items())
                if p.alive and p.learning and n not in self.trace.crashed]

    def finish(self) -> None:
        for n, p in sorted(self.nodes.items()):
            if p.alive and p.app is not None:
                self.trace.state_hashes[n] = p.state_hash()

    def view(self) -> TopologyView:
        return self.registry.view()

    def coordinator(self, group: int) -> Optional[int]:
        try:
            return self.registry.view().coordinator(group)
        except MRPError:
            return None
