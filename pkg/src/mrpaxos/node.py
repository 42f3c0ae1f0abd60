"""A replica process: ring members, learner merge, application, recovery.

The process runs on an environment that provides time, timers and frame
transport (``now``, ``at``, ``transmit``) plus the run trace and the
checkpoint store.  The simulated cluster and the TCP runtime both implement
that environment.

A simple CPU model makes load visible in simulation: every frame received or
sent occupies the network server for ``frame_cost + byte_cost * size``, and
the learner's merge and the application run on a separate server so that
forwarding along the ring never waits for execution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

from . import wire
from .core import Delivery, MessageId, Value, unwrap, wrap
from .errors import MRPError, StoreUnavailable
from .membership import LEARNER, TopologyView
from .merge import MergeCursor
from .pacing import ClockSource
from .recovery import CachingRecovery, LogTailRecovery, RecoveryPhase, take_checkpoint
from .ring import ON_DISK_SYNC, RingConfig, RingMember
from .wire import Frame

log = logging.getLogger(__name__)


@dataclass
class CpuModel:
    frame_cost: float = 0.0
    byte_cost: float = 0.0
    merge_cost: float = 0.0
    apply_cost: float = 0.0
    fetch_cost: float = 0.0
    sync_write_cost: float = 0.0

    @property
    def net_enabled(self) -> bool:
        return self.frame_cost > 0 or self.byte_cost > 0


@dataclass
class NodeConfig:
    heartbeat_interval: float = 0.05
    checkpoint_period: float = 30.0
    cache_capacity: int = 256 << 20
    recovery_poll: float = 0.1
    register_retry: float = 0.1
    m: int = 1
    reply: bool = True


class Process:
    def __init__(self, env, nid: int, roles, rings, *, ring_cfg: Optional[RingConfig] = None,
                 ring_cfgs: Optional[dict] = None, cpu: Optional[CpuModel] = None,
                 cfg: Optional[NodeConfig] = None, app_factory: Optional[Callable] = None,
                 skew: float = 0.0, region=None):
        self.env = env
        self.nid = nid
        self.roles = frozenset(roles)
        self.rings = tuple(sorted(set(rings)))
        self.ring_cfg = ring_cfg or RingConfig()
        self.ring_cfgs = ring_cfgs or {}
        self.cpu = cpu or CpuModel()
        self.cfg = cfg or NodeConfig()
        self.app_factory = app_factory
        self.region = region
        # where peers reach this process; empty in simulation
        self.address = ""
        self.trace = env.trace
        self.clock = ClockSource(env.now, skew)
        self.alive = True
        self.incarnation = 0
        self._reset_state()

    # -- lifecycle --------------------------------------------------------

    def _reset_state(self) -> None:
        self.view: Optional[TopologyView] = None
        self.members = {g: RingMember(self, g, self.ring_cfgs.get(g, self.ring_cfg)) for g in self.rings}
        self.learning = LEARNER in self.roles
        self.cursor = MergeCursor(self.rings, self.cfg.m) if self.learning and self.rings else None
        self.app = self.app_factory() if (self.app_factory and self.learning) else None
        self.recovery = None
        self.recovery_started = False
        self.net_free_at = 0.0
        self.app_free_at = 0.0
        self.checkpoint_id = 0
        self.registered = False
        self.rejections = 0
        self.delivered = 0

    def now(self) -> float:
        return self.env.now()

    def start(self, view: Optional[TopologyView] = None, bootstrap: bool = False) -> None:
        """Begin heartbeats and checkpointing; install the bootstrap view if given."""
        if view is not None:
            self.registered = True
            self.on_view(view, bootstrap=bootstrap)
        self.after(self.cfg.heartbeat_interval, self._heartbeat)
        if self.app is not None and self.cfg.checkpoint_period > 0:
            self.after(self.cfg.checkpoint_period, self._checkpoint)

    def crash(self) -> None:
        self.alive = False
        self.incarnation += 1
        self.trace.crashed.add(self.nid)
        self.trace.event("crash", f"node={self.nid}")

    def pause(self, duration: float) -> None:
        """Stop processing for ``duration`` (a long GC pause or a stalled host)."""
        until = self.now() + duration
        self.net_free_at = max(self.net_free_at, until)
        self.app_free_at = max(self.app_free_at, until)
        self.trace.event("pause", f"node={self.nid} until={until:.3f}")

    def restart(self, protocol: str = "new") -> None:
        """Come back with empty state and recover the application."""
        self.alive = True
        self.incarnation += 1
        # acceptor state was volatile, so the node rejoins as a listener
        self.roles = frozenset({LEARNER}) if LEARNER in self.roles else frozenset()
        self._reset_state()
        self.trace.recovered.add(self.nid)
        self.trace.restarted_at[self.nid] = self.now()
        self.trace.event("restart", f"node={self.nid} protocol={protocol}")
        for m in self.members.values():
            m.passthrough = True
        if self.learning and self.rings:
            host = _RecoveryHost(self)
            if protocol == "old":
                self.recovery = LogTailRecovery(host, self.rings)
            else:
                self.recovery = CachingRecovery(host, self.rings, self.cfg.cache_capacity,
                                                self.cfg.recovery_poll)
        self._register()
        self.after(self.cfg.heartbeat_interval, self._heartbeat)
        if self.app is not None and self.cfg.checkpoint_period > 0:
            self.after(self.cfg.checkpoint_period, self._checkpoint)

    def join(self) -> None:
        """Register with the registry; the first view arrives in reply."""
        self._register()

    def _register(self) -> None:
        body = {"node": self.nid, "roles": sorted(self.roles), "rings": list(self.rings),
                "incarnation": self.incarnation, "address": self.address}
        self.send(self.env.registry_id, wire.json_frame(wire.REGISTER, body, node=self.nid))
        self.after(self.cfg.register_retry * 5, self._register_check)

    def _register_check(self) -> None:
        if not self.registered:
            self._register()

    # -- timers and transport ---------------------------------------------

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.env.at(self.now() + delay, self._guarded, self.incarnation, fn, args)

    def after_cpu(self, fn: Callable, *args) -> None:
        self.env.at(max(self.now(), self.net_free_at), self._guarded, self.incarnation, fn, args)

    def _guarded(self, inc: int, fn: Callable, args) -> None:
        if self.alive and inc == self.incarnation:
            fn(*args)

    def send(self, dst: int, frame: Frame) -> None:
        if not self.alive:
            return
        cpu = self.cpu
        depart = None
        if cpu.net_enabled:
            now = self.now()
            self.net_free_at = max(self.net_free_at, now) + cpu.frame_cost + cpu.byte_cost * frame.size()
            depart = self.net_free_at
        elif self.net_free_at > self.now():
            depart = self.net_free_at
        self.env.transmit(self.nid, dst, frame, depart)

    def receive(self, src: int, frame: Frame) -> None:
        cpu = self.cpu
        now = self.now()
        if cpu.net_enabled:
            done = max(now, self.net_free_at) + cpu.frame_cost + cpu.byte_cost * frame.size()
            self.net_free_at = done
        else:
            done = max(now, self.net_free_at)
        if done > now:
            self.env.at(done, self._guarded, self.incarnation, self.handle, (src, frame))
        else:
            self.handle(src, frame)

    def handle(self, src: int, frame: Frame) -> None:
        kind = frame.kind
        if kind == wire.VIEW:
            self.on_view(TopologyView.from_json(wire.json_body(frame)))
        elif kind == wire.REGISTER_REJECT:
            self.registered = False
            self.rejections += 1
            log.warning("node %s: registration rejected, id already in use", self.nid)
            self.after(self.cfg.register_retry, self._register)
        else:
            m = self.members.get(frame.group)
            if m is not None:
                m.on_frame(src, frame)

    def on_link_down(self, peer: int) -> None:
        self.trace.event("link-down", f"node={self.nid} peer={peer}")

    # -- membership -------------------------------------------------------

    def on_view(self, view: TopologyView, bootstrap: bool = False) -> None:
        if self.view is not None and view.epoch <= self.view.epoch:
            return
        present = any(view.contains(g, self.nid) for g in self.rings)
        if self.rings and not present:
            if self.registered:
                # dropped by the registry while alive: register again
                self.registered = False
                self.trace.event("excluded", f"node={self.nid} epoch={view.epoch}")
                self.after(self.cfg.register_retry, self._register)
            self.view = view
            for m in self.members.values():
                m.install_view(view)
            return
        self.registered = True
        self.view = view
        for g in self.rings:
            self.members[g].install_view(view, bootstrap=bootstrap)
        if self.recovery is not None and not self.recovery_started:
            self.recovery_started = True
            self.recovery.start()

    def _heartbeat(self) -> None:
        self.send(self.env.registry_id, Frame(wire.HEARTBEAT, 0, instance=self.incarnation,
                                              aux=b"%d" % self.nid))
        self.after(self.cfg.heartbeat_interval, self._heartbeat)

    # -- ring member host interface ---------------------------------------

    def storage_write(self, value: Value) -> None:
        if self.cpu.sync_write_cost and self.ring_cfg.storage_mode == ON_DISK_SYNC:
            self.net_free_at = max(self.net_free_at, self.now()) + self.cpu.sync_write_cost

    def serve_fetch(self, n: int) -> None:
        self.trace.fetch_served[self.nid] += n
        if self.cpu.fetch_cost:
            self.net_free_at = max(self.net_free_at, self.now()) + self.cpu.fetch_cost * n

    def fetch_allowed(self) -> bool:
        return self.recovery is None or self.recovery.phase == RecoveryPhase.LIVE

    def count_fetch(self, group: int, first: int, last: int) -> None:
        self.trace.fetches[self.nid] += 1
        if self.recovery is not None and self.recovery.phase != RecoveryPhase.LIVE:
            self.trace.recovery_fetches[self.nid] += 1

    def recovery_fetch_reply(self, group: int, f: Frame) -> bool:
        rec = self.recovery
        if isinstance(rec, LogTailRecovery) and rec.phase == RecoveryPhase.REPLAYING:
            value = f.value if f.votes == wire.FETCH_OK else None
            rec.on_fetched(group, f.instance, value, f.votes)
            return True
        return False

    def deliver_decision(self, group: int, instance: int, value: Value) -> None:
        if self.cursor is None:
            return
        rec = self.recovery
        if rec is not None and rec.phase < RecoveryPhase.LIVE:
            rec.on_decision(group, instance, value)
            return
        self.cursor.enqueue_decision(group, instance, value)
        self._run_merge()

    def _run_merge(self) -> None:
        cpu = self.cpu
        t = max(self.now(), self.app_free_at) + cpu.merge_cost
        out = self.cursor.try_deliver()
        for d in out:
            t += cpu.apply_cost
            self._apply(d, t, reply=True)
        self.app_free_at = t

    def _apply(self, d: Delivery, t: float, reply: bool) -> None:
        mid, body = unwrap(d.payload)
        d = Delivery(d.group, d.ring_instance, d.global_slot, body, mid)
        result = self.app.apply(d) if self.app is not None else None
        self.delivered += 1
        self.trace.deliver(self.nid, t, d.group, d.ring_instance, d.global_slot, mid, len(body))
        if reply and self.cfg.reply and mid is not None:
            frame = wire.reply_frame(mid.client, mid.seq, d.group, result or b"")
            self.env.transmit(self.nid, mid.client, frame, t)
        sub = getattr(self, "subscription", None)
        if sub is not None:
            sub.push(d)

    # -- checkpoints and recovery -----------------------------------------

    def _checkpoint(self) -> None:
        self.after(self.cfg.checkpoint_period, self._checkpoint)
        if self.recovery is not None and self.recovery.phase != RecoveryPhase.LIVE:
            return
        self.checkpoint_id += 1
        cp = take_checkpoint(self.cursor, self.app, self.checkpoint_id, self.nid)
        delay = self.env.store_delay(cp.size_bytes)
        self.after(delay, self._store_checkpoint, cp)

    def _store_checkpoint(self, cp) -> None:
        try:
            self.env.store.put(cp)
        except StoreUnavailable as exc:
            self.trace.event("checkpoint-skipped", f"node={self.nid} id={cp.checkpoint_id} {exc}")
            return
        self.trace.checkpoints[self.nid].append((self.now(), cp.checkpoint_id, dict(cp.ring_slots)))
        self.trace.event("checkpoint", f"node={self.nid} id={cp.checkpoint_id} slots={sum(cp.ring_slots.values())}")

    def go_live(self, cursor: MergeCursor, deliveries: list) -> None:
        self.cursor = cursor
        t = max(self.now(), self.app_free_at)
        for d in deliveries:
            t += self.cpu.apply_cost
            mid, body = unwrap(d.payload)
            self.trace.deliver(self.nid, t, d.group, d.ring_instance, d.global_slot, mid, len(body))
        self.app_free_at = t
        self.delivered += len(deliveries)
        if self.recovery is not None:
            self.trace.resumed[self.nid] = dict(self.recovery.resume_at)
        for g in self.rings:
            self.members[g].go_live(cursor.next_instance[g])
        self.trace.event("live", f"node={self.nid} slots={cursor.next_global_slot}")

    def state_hash(self) -> Optional[str]:
        return self.app.state_hash() if self.app is not None else None


class _EnvelopeApp:
    """Strips the message id envelope before replayed commands reach the app."""

    def __init__(self, app):
        self.app = app

    def apply(self, d: Delivery):
        mid, body = unwrap(d.payload)
        return self.app.apply(Delivery(d.group, d.ring_instance, d.global_slot, body, mid))

    def restore(self, blob: bytes) -> None:
        self.app.restore(blob)

    def snapshot(self) -> bytes:
        return self.app.snapshot()


class _RecoveryHost:
    """What the recovery procedures need from a process."""

    def __init__(self, proc: Process):
        self.proc = proc
        self.m = proc.cfg.m

    @property
    def alive(self) -> bool:
        return self.proc.alive

    @property
    def app(self):
        return _EnvelopeApp(self.proc.app)

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.proc.after(delay, fn, *args)

    def load_checkpoints(self, rings, callback: Callable) -> None:
        env = self.proc.env
        try:
            cps = env.store.candidates(rings)
        except StoreUnavailable:
            cps = []
        size = cps[0].size_bytes if cps else 0
        self.proc.trace.event("checkpoint-fetch", f"node={self.proc.nid} candidates={len(cps)}")
        self.proc.after(env.store_delay(size), callback, cps)

    def go_live(self, cursor, deliveries) -> None:
        self.proc.go_live(cursor, deliveries)

    def fetch(self, group: int, first: int, last: int) -> None:
        proc = self.proc
        proc.count_fetch(group, first, last)
        target = proc.view.coordinator(group) if proc.view is not None else None
        if target is None:
            return
        proc.send(target, Frame(wire.FETCH, group, instance=first, aux=last))


class SimClient:
    """Workload generator: closed loop (N outstanding) or open loop (fixed rate)."""

    def __init__(self, env, cid: int, groups, *, payload: Callable[[], bytes], mode: str = "closed",
                 threads: int = 1, rate: float = 100.0, start: float = 0.0, stop: float = 1.0,
                 resubmit_timeout: float = 1.0, jitter: bool = True, region=None):
        self.env = env
        self.nid = cid
        self.groups = list(groups)
        self.payload = payload
        self.mode = mode
        self.threads = threads
        self.rate = rate
        self.start_at = start
        self.stop_at = stop
        self.resubmit_timeout = resubmit_timeout
        self.jitter = jitter
        self.region = region
        self.trace = env.trace
        self.alive = True
        self.incarnation = 0
        self.view: Optional[TopologyView] = None
        self.seq = 0
        self.outstanding: dict[int, tuple[int, bytes]] = {}
        self.latencies: list[float] = []
        self.rng = env.rng

    def start(self, view: Optional[TopologyView] = None) -> None:
        self.view = view
        if self.mode == "closed":
            for _ in range(self.threads):
                self.env.at(self.start_at, self._guard, self.incarnation, self._submit_next)
        else:
            phase = self.rng.random() / self.rate if self.jitter else 0.0
            self.env.at(self.start_at + phase, self._guard, self.incarnation, self._open_tick)

    def _guard(self, inc, fn, *args):
        if self.alive and inc == self.incarnation:
            fn(*args)

    def crash(self) -> None:
        self.alive = False
        self.incarnation += 1

    def _open_tick(self) -> None:
        now = self.env.now()
        if now >= self.stop_at:
            return
        self._submit_next()
        self.env.at(now + 1.0 / self.rate, self._guard, self.incarnation, self._open_tick)

    def _submit_next(self) -> None:
        if self.env.now() >= self.stop_at:
            return
        group = self.rng.choice(self.groups) if len(self.groups) > 1 else self.groups[0]
        self.submit(group, self.payload())

    def submit(self, group: int, body: bytes) -> MessageId:
        """Multicast ``body`` to ``group``; resubmitted until a replica replies."""
        seq = self.seq
        self.seq += 1
        mid = MessageId(self.nid, seq)
        data = wrap(mid, body)
        self.outstanding[seq] = (group, data)
        self.trace.submit(mid, group)
        self._send(group, data)
        self.env.at(self.env.now() + self.resubmit_timeout, self._guard, self.incarnation,
                    self._check_resubmit, seq)
        return mid

    def _send(self, group: int, data: bytes) -> None:
        if self.view is None:
            return
        try:
            coord = self.view.coordinator(group)
        except MRPError:
            return
        self.env.transmit(self.nid, coord, Frame(wire.CLIENT_SUBMIT, group, value=Value.app([data])), None)

    def _check_resubmit(self, seq: int) -> None:
        entry = self.outstanding.get(seq)
        if entry is None:
            return
        group, data = entry
        self.trace.submit(MessageId(self.nid, seq), group, resubmit=True)
        self._send(group, data)
        self.env.at(self.env.now() + self.resubmit_timeout, self._guard, self.incarnation,
                    self._check_resubmit, seq)

    def receive(self, src: int, frame: Frame) -> None:
        if frame.kind == wire.VIEW:
            view = TopologyView.from_json(wire.json_body(frame))
            if self.view is None or view.epoch > self.view.epoch:
                self.view = view
            return
        if frame.kind != wire.CLIENT_REPLY:
            return
        client, seq, _ = wire.parse_reply(frame)
        if seq not in self.outstanding:
            return
        del self.outstanding[seq]
        mid = MessageId(client, seq)
        self.trace.reply(mid)
        t0 = self.trace.submitted[mid][0]
        self.latencies.append(self.env.now() - t0)
        if self.mode == "closed":
            self._submit_next()
