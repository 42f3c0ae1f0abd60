"""Scenario files: topology, links, workload, pacing, faults.

A scenario is a TOML document (or the equivalent dict).  Durations that
configure the protocol are in milliseconds and carry an ``_ms`` suffix; run
schedule times (fault times, client start and stop, duration) are seconds.
Latency specs use the ``const:X`` / ``uniform:A,B`` / ``normal:MU,SIGMA``
millisecond syntax.

::

    name = "two-rings"
    duration = 5.0          # clients stop here
    drain = 2.0             # extra simulated time before the run ends

    [rings]
    groups = [1, 2]

    [[nodes]]
    id = 1
    roles = ["proposer", "acceptor"]
    rings = [1]
    region = "eu"

    [[links]]
    from = "eu"
    to = "us"
    latency = "const:40"

    [[clients]]
    id = 100
    groups = [1, 2]
    threads = 4
    payload = 1024

    [[faults]]
    at = 2.0
    kind = "crash"
    node = 1

    [pacing]
    lambda = 1000
    delta_t_ms = 5
"""
from __future__ import annotations

import copy
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Optional

from .cluster import SimCluster
from .errors import InvalidScenario
from .kv import KvStore, KvWorkload, LogApp
from .membership import ACCEPTOR, LEARNER, PROPOSER
from .node import CpuModel, NodeConfig
from .pacing import parse_compensation
from .ring import IN_MEMORY, ON_DISK_ASYNC, ON_DISK_SYNC, RingConfig
from .sim import LinkSpec, parse_latency

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "scenarios")

FAULT_KINDS = ("crash", "restart", "pause", "kill-region")
APPS = {"kv": KvStore, "log": LogApp, "none": None}
_TOP_KEYS = {"name", "seed", "duration", "drain", "max_events", "network", "rings", "nodes",
             "links", "clients", "faults", "pacing", "ring", "cpu", "app", "checkpoint",
             "metrics", "ring_overrides", "description"}


def _ms(d: dict, key: str, default: float) -> float:
    v = d.get(key)
    return default if v is None else float(v) / 1000.0


@dataclass
class NodeSpec:
    id: int
    roles: frozenset
    rings: tuple
    region: Any = None
    skew: float = 0.0


@dataclass
class ClientSpec:
    id: int
    groups: tuple
    mode: str = "closed"
    threads: int = 1
    rate: float = 100.0
    payload: int = 1024
    workload: str = "bytes"
    start: float = 0.0
    stop: Optional[float] = None
    resubmit: float = 1.0
    region: Any = None


@dataclass
class FaultSpec:
    at: float
    kind: str
    node: Optional[int] = None
    region: Any = None
    duration: float = 0.0
    protocol: str = "new"


@dataclass
class Scenario:
    name: str
    groups: list
    nodes: list
    clients: list = field(default_factory=list)
    links: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    duration: float = 5.0
    drain: float = 1.0
    seed: int = 0
    max_events: Optional[int] = 20_000_000
    default_latency: Any = None
    drop: float = 0.0
    rto: float = 0.01
    suspicion_timeout: float = 0.2
    check_interval: float = 0.05
    codec_check: bool = False
    quorum: dict = field(default_factory=dict)
    ring_cfg: RingConfig = field(default_factory=RingConfig)
    ring_cfgs: dict = field(default_factory=dict)
    cpu: CpuModel = field(default_factory=CpuModel)
    node_cfg: NodeConfig = field(default_factory=NodeConfig)
    app: str = "log"
    store_latency: float = 0.01
    store_bandwidth: float = 100e6
    metrics: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def horizon(self) -> float:
        return self.duration + self.drain

    def learners(self) -> list[int]:
        return [n.id for n in self.nodes if LEARNER in n.roles]

    def measure_learners(self) -> list[int]:
        chosen = self.metrics.get("learners")
        return list(chosen) if chosen else self.learners()

    def build(self, seed: Optional[int] = None) -> SimCluster:
        seed = self.seed if seed is None else seed
        cluster = SimCluster(
            seed, self.groups,
            default_latency=self.default_latency or parse_latency("const:0.1"),
            rto=self.rto, suspicion_timeout=self.suspicion_timeout,
            check_interval=self.check_interval, quorum=self.quorum or None,
            codec_check=self.codec_check, store_latency=self.store_latency,
            store_bandwidth=self.store_bandwidth)
        net = cluster.net
        net.default.drop_probability = self.drop
        for spec in self.links:
            if spec["kind"] == "region":
                net.set_region_link(spec["from"], spec["to"], spec["latency"], spec["drop"],
                                    spec["symmetric"])
            else:
                net.set_link(LinkSpec(spec["from"], spec["to"], spec["latency"], spec["drop"]))
                if spec["symmetric"]:
                    net.set_link(LinkSpec(spec["to"], spec["from"], spec["latency"], spec["drop"]))
        app_cls = APPS[self.app]
        for n in self.nodes:
            cluster.add_node(n.id, n.roles, n.rings, region=n.region, ring_cfg=self.ring_cfg,
                             ring_cfgs=self.ring_cfgs, cpu=self.cpu, cfg=self.node_cfg,
                             app_factory=app_cls, skew=n.skew)
        for c in self.clients:
            cluster.add_client(c.id, c.groups, region=c.region, payload=_payload_fn(c, cluster),
                               mode=c.mode, threads=c.threads, rate=c.rate, start=c.start,
                               stop=self.duration if c.stop is None else c.stop,
                               resubmit_timeout=c.resubmit)
        for f in self.faults:
            if f.kind == "crash":
                cluster.sim.at(f.at, cluster.crash, f.node)
            elif f.kind == "restart":
                cluster.sim.at(f.at, cluster.restart, f.node, f.protocol)
            elif f.kind == "pause":
                cluster.sim.at(f.at, cluster.pause, f.node, f.duration)
            else:
                cluster.sim.at(f.at, cluster.kill_region, f.region)
        return cluster


def _payload_fn(c: ClientSpec, cluster: SimCluster):
    if c.workload == "kv":
        wl = KvWorkload(cluster.rng, size=c.payload)
        return wl.next
    blob = b"\xab" * c.payload
    return lambda: blob


def load(source, overrides: Optional[dict] = None) -> Scenario:
    """Parse a scenario from a dict, a path, a bundled or generated name, or TOML text."""
    data = copy.deepcopy(source) if isinstance(source, dict) else _resolve(source)
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data)


def parse_toml(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidScenario(f"bad scenario file: {exc}") from None


def _resolve(source) -> dict:
    s = str(source)
    for path in (s, os.path.join(SCENARIO_DIR, s if s.endswith(".toml") else s + ".toml")):
        if os.path.isfile(path):
            with open(path, "rb") as fh:
                return parse_toml(fh.read().decode())
    from .scenarios_gen import generate
    data = generate(s)
    if data is not None:
        return data
    if "\n" in s or "=" in s:
        return parse_toml(s)
    raise InvalidScenario(f"no scenario named {s!r}")


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _int_list(v, what: str) -> tuple:
    if isinstance(v, int):
        v = [v]
    try:
        return tuple(int(x) for x in v)
    except (TypeError, ValueError):
        raise InvalidScenario(f"{what}: expected a list of integers, got {v!r}") from None


def _ring_config(pacing: dict, ring: dict, base: Optional[RingConfig] = None) -> RingConfig:
    b = base or RingConfig()
    try:
        mode, fixed = parse_compensation(pacing.get("compensation", b.compensation))
    except ValueError as exc:
        raise InvalidScenario(str(exc)) from None
    static = pacing.get("static_delay_ms")
    storage = ring.get("storage", b.storage_mode)
    if storage not in (IN_MEMORY, ON_DISK_SYNC, ON_DISK_ASYNC):
        raise InvalidScenario(f"unknown storage mode {storage!r}")
    aggregate = pacing.get("delay_aggregate", b.delay_aggregate)
    if aggregate not in ("max", "mean"):
        raise InvalidScenario(f"unknown delay aggregate {aggregate!r}")
    cfg = RingConfig(
        lam=float(pacing.get("lambda", b.lam)),
        delta_t=_ms(pacing, "delta_t_ms", b.delta_t),
        pacing=bool(pacing.get("enabled", b.pacing)),
        compensation=mode if mode != "fixed" else f"fixed:{fixed * 1000.0}",
        static_delay=float(static) / 1000.0 if static is not None else b.static_delay,
        delay_aggregate=aggregate,
        ack_every=int(pacing.get("ack_every", b.ack_every)),
        batch_max_bytes=int(ring.get("batch_max_bytes", b.batch_max_bytes)),
        window=int(ring.get("window", b.window)),
        retain_window=int(ring.get("retain_window", b.retain_window)),
        storage_mode=storage,
        decision_timeout=_ms(ring, "decision_timeout_ms", b.decision_timeout),
        prepare_timeout=_ms(ring, "prepare_timeout_ms", b.prepare_timeout),
        gap_timeout=_ms(ring, "gap_timeout_ms", b.gap_timeout),
        fetch_chunk=int(ring.get("fetch_chunk", b.fetch_chunk)),
        t_ref=float(pacing.get("t_ref", b.t_ref)),
    )
    if cfg.lam <= 0 or cfg.delta_t <= 0:
        raise InvalidScenario("lambda and delta_t must be positive")
    return cfg


def node_settings(data: dict) -> tuple[NodeConfig, str]:
    """Process settings and application kind from the network, checkpoint and app sections."""
    app = data.get("app") or {}
    cp = data.get("checkpoint") or {}
    net = data.get("network") or {}
    node_cfg = NodeConfig(
        heartbeat_interval=_ms(net, "heartbeat_ms", 0.05),
        checkpoint_period=float(cp.get("period", 30.0)),
        cache_capacity=int(cp.get("cache_bytes", 256 << 20)),
        recovery_poll=_ms(cp, "poll_ms", 0.1),
        m=int(app.get("m", 1)),
        reply=bool(app.get("reply", True)),
    )
    kind = app.get("kind", "log")
    if kind not in APPS:
        raise InvalidScenario(f"unknown app {kind!r}")
    return node_cfg, kind


def ring_settings(data: dict) -> RingConfig:
    return _ring_config(data.get("pacing") or {}, data.get("ring") or {})


def from_dict(data: dict) -> Scenario:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise InvalidScenario(f"unknown scenario keys: {sorted(unknown)}")
    rings = data.get("rings") or {}
    groups = sorted(set(_int_list(rings.get("groups", []), "rings.groups")))
    if not groups:
        raise InvalidScenario("scenario declares no rings")
    quorum = {int(g): int(q) for g, q in (rings.get("quorum") or {}).items()}

    nodes = []
    seen = set()
    for raw in data.get("nodes") or []:
        try:
            nid = int(raw["id"])
        except (KeyError, TypeError, ValueError):
            raise InvalidScenario(f"node without a valid id: {raw!r}") from None
        if nid <= 0:
            raise InvalidScenario(f"node id {nid}: ids start at 1 (0 is the registry)")
        if nid in seen:
            raise InvalidScenario(f"duplicate node id {nid}")
        seen.add(nid)
        roles = frozenset(raw.get("roles", [PROPOSER, ACCEPTOR, LEARNER]))
        bad = roles - {PROPOSER, ACCEPTOR, LEARNER}
        if bad:
            raise InvalidScenario(f"node {nid}: unknown roles {sorted(bad)}")
        node_rings = _int_list(raw.get("rings", []), f"node {nid} rings")
        for g in node_rings:
            if g not in groups:
                raise InvalidScenario(f"node {nid} references undeclared group {g}")
        nodes.append(NodeSpec(nid, roles, node_rings, raw.get("region"), _ms(raw, "skew_ms", 0.0)))
    if not nodes:
        raise InvalidScenario("scenario declares no nodes")
    for g in groups:
        if not any(g in n.rings and ACCEPTOR in n.roles for n in nodes):
            raise InvalidScenario(f"ring {g} has no acceptor")
    regions = {n.region for n in nodes if n.region is not None}

    clients = []
    for raw in data.get("clients") or []:
        cid = int(raw.get("id", 0))
        if cid <= 0 or cid in seen:
            raise InvalidScenario(f"client id {cid} is missing or already used")
        seen.add(cid)
        cgroups = _int_list(raw.get("groups", groups), f"client {cid} groups")
        for g in cgroups:
            if g not in groups:
                raise InvalidScenario(f"client {cid} references undeclared group {g}")
        mode = raw.get("mode", "closed")
        if mode not in ("closed", "open"):
            raise InvalidScenario(f"client {cid}: mode must be closed or open")
        workload = raw.get("workload", "bytes")
        if workload not in ("bytes", "kv"):
            raise InvalidScenario(f"client {cid}: unknown workload {workload!r}")
        clients.append(ClientSpec(
            cid, cgroups, mode, int(raw.get("threads", 1)), float(raw.get("rate", 100.0)),
            int(raw.get("payload", 1024)), workload, float(raw.get("start", 0.0)),
            None if raw.get("stop") is None else float(raw["stop"]),
            _ms(raw, "resubmit_ms", 1.0), raw.get("region")))
        if raw.get("region") is not None:
            regions.add(raw["region"])

    links = []
    for raw in data.get("links") or []:
        try:
            a, b = raw["from"], raw["to"]
        except KeyError:
            raise InvalidScenario(f"link needs from and to: {raw!r}") from None
        kind = "node" if isinstance(a, int) and isinstance(b, int) else "region"
        if kind == "node":
            for x in (a, b):
                if x not in seen:
                    raise InvalidScenario(f"link references undeclared node {x}")
        else:
            for x in (a, b):
                if x not in regions:
                    raise InvalidScenario(f"link references undeclared region {x!r}")
        drop = float(raw.get("drop", 0.0))
        if not 0.0 <= drop < 1.0:
            raise InvalidScenario(f"drop probability {drop} out of range")
        links.append({"kind": kind, "from": a, "to": b, "latency": parse_latency(raw.get("latency", 0.1)),
                      "drop": drop, "symmetric": bool(raw.get("symmetric", True))})

    faults = []
    for raw in data.get("faults") or []:
        kind = raw.get("kind")
        if kind not in FAULT_KINDS:
            raise InvalidScenario(f"unknown fault kind {kind!r}")
        f = FaultSpec(float(raw.get("at", 0.0)), kind, raw.get("node"), raw.get("region"),
                      float(raw.get("duration", 0.0)), raw.get("protocol", "new"))
        if kind == "kill-region":
            if f.region not in regions:
                raise InvalidScenario(f"fault references undeclared region {f.region!r}")
        elif f.node not in seen:
            raise InvalidScenario(f"fault references undeclared node {f.node!r}")
        if f.protocol not in ("new", "old"):
            raise InvalidScenario(f"unknown recovery protocol {f.protocol!r}")
        faults.append(f)
    faults.sort(key=lambda f: f.at)

    pacing = data.get("pacing") or {}
    ring = data.get("ring") or {}
    ring_cfg = _ring_config(pacing, ring)
    ring_cfgs = {}
    for g, over in (data.get("ring_overrides") or {}).items():
        g = int(g)
        if g not in groups:
            raise InvalidScenario(f"override for undeclared group {g}")
        ring_cfgs[g] = _ring_config(over.get("pacing", {}), over.get("ring", {}), ring_cfg)

    cpu_raw = data.get("cpu") or {}
    cpu = CpuModel(
        frame_cost=float(cpu_raw.get("frame_us", 0.0)) / 1e6,
        byte_cost=float(cpu_raw.get("byte_ns", 0.0)) / 1e9,
        merge_cost=float(cpu_raw.get("merge_us", 0.0)) / 1e6,
        apply_cost=float(cpu_raw.get("apply_us", 0.0)) / 1e6,
        fetch_cost=float(cpu_raw.get("fetch_us", 0.0)) / 1e6,
        sync_write_cost=float(cpu_raw.get("sync_write_us", 0.0)) / 1e6,
    )
    cp = data.get("checkpoint") or {}
    net = data.get("network") or {}
    node_cfg, kind = node_settings(data)
    drop = float(net.get("drop", 0.0))
    if not 0.0 <= drop < 1.0:
        raise InvalidScenario(f"drop probability {drop} out of range")

    metrics = dict(data.get("metrics") or {})
    for n in metrics.get("learners", []):
        if n not in seen:
            raise InvalidScenario(f"metrics references undeclared node {n}")

    return Scenario(
        name=str(data.get("name", "scenario")), groups=groups, nodes=nodes, clients=clients,
        links=links, faults=faults, duration=float(data.get("duration", 5.0)),
        drain=float(data.get("drain", 1.0)), seed=int(data.get("seed", 0)),
        max_events=data.get("max_events", 20_000_000),
        default_latency=parse_latency(net.get("latency", "const:0.1")), drop=drop,
        rto=_ms(net, "rto_ms", 0.01), suspicion_timeout=_ms(net, "suspicion_timeout_ms", 0.2),
        check_interval=_ms(net, "check_ms", 0.05), codec_check=bool(net.get("codec_check", False)),
        quorum=quorum, ring_cfg=ring_cfg, ring_cfgs=ring_cfgs, cpu=cpu, node_cfg=node_cfg,
        app=kind, store_latency=_ms(cp, "store_latency_ms", 0.01),
        store_bandwidth=float(cp.get("store_mbps", 800.0)) * 1e6 / 8,
        metrics=metrics, raw=data,
    )
