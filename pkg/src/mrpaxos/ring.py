"""Consensus over a ring overlay, one :class:`RingMember` per (node, group).

The coordinator (first live acceptor) assigns values to instances and sends a
PHASE2 message to its ring successor.  Each acceptor adds its vote and passes
the message on; the acceptor that completes a quorum turns it into a DECISION,
which keeps circulating until it has reached every member.  Phase 1 runs the
same way: PHASE1A collects promises hop by hop while each acceptor emits
PHASE1B reports of its accepted values, which travel along the ring to the
coordinator ahead of the PHASE1A itself.

A member talks to its node through a small host interface: ``nid``,
``send(dst, frame)``, ``after(delay, fn, *args)``, ``clock``, ``trace``,
``deliver_decision(group, instance, value)``, ``fetch_allowed`` and
``count_fetch()``.
"""
from __future__ import annotations

import logging
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .core import ZERO_BALLOT, Ballot, Decision, GroupId, Value, unwrap
from .errors import NoPromisedRange, NotCoordinator, Preempted, StaleBallot, Trimmed, Undecided
from .membership import TopologyView, elect_coordinator
from .pacing import DelayEstimator, Pacer, SkipLedger, parse_compensation
from .wire import Frame

log = logging.getLogger(__name__)

IN_MEMORY = "in-memory"
ON_DISK_SYNC = "on-disk-sync"
ON_DISK_ASYNC = "on-disk-async"


@dataclass
class RingConfig:
    lam: float = 1000.0
    delta_t: float = 0.005
    pacing: bool = True
    compensation: str = "off"
    static_delay: Optional[float] = None
    delay_aggregate: str = "max"
    ack_every: int = 4
    batch_max_bytes: int = 32768
    window: int = 1000
    retain_window: int = 100000
    storage_mode: str = IN_MEMORY
    decision_timeout: float = 0.5
    prepare_timeout: float = 0.5
    gap_timeout: float = 0.2
    fetch_chunk: int = 100
    t_ref: float = 0.0


@dataclass
class AcceptorState:
    promised: Ballot = ZERO_BALLOT
    accepted: dict = field(default_factory=dict)
    storage_mode: str = IN_MEMORY
    retain_window: int = 100000

    def accept(self, ballot: Ballot, instance: int, value: Value) -> None:
        if ballot < self.promised:
            raise StaleBallot(f"{ballot} < promised {self.promised}")
        self.promised = ballot
        self.accepted[instance] = (ballot, value)

    def trim_below(self, instance: int) -> None:
        for i in [i for i in self.accepted if i < instance]:
            del self.accepted[i]


class _Prepare:
    __slots__ = ("ballot", "first", "adopted", "started")

    def __init__(self, ballot: Ballot, first: int, started: float):
        self.ballot = ballot
        self.first = first
        self.adopted: dict[int, tuple[Ballot, Value]] = {}
        self.started = started


class RingMember:
    def __init__(self, host, group: GroupId, config: Optional[RingConfig] = None):
        self.host = host
        self.group = group
        self.cfg = config or RingConfig()
        self.view: Optional[TopologyView] = None
        self.members: tuple = ()
        self.successor: Optional[int] = None
        self.roles: frozenset = frozenset()
        self.acceptor = AcceptorState(storage_mode=self.cfg.storage_mode,
                                      retain_window=self.cfg.retain_window)
        # decided values known here: instance -> (value, ballot it was learned under)
        self.decided: dict[int, tuple[Value, Ballot]] = {}
        self.next_deliver = 0
        self.max_known = -1
        # a recovering learner starts at the first decision it sees and
        # passes decisions through in arrival order until it goes live
        self.passthrough = False
        self.low_retained = 0
        self.max_round = 0
        self.gap_pending = False
        self.gap_requests = 0

        # coordinator state
        self.coordinator: Optional[int] = None
        self.ballot: Optional[Ballot] = None
        self.prepared = False
        self.preparing: Optional[_Prepare] = None
        self.next_instance = 0
        self.inflight: OrderedDict[int, tuple[Value, float, bool]] = OrderedDict()
        self.queue: deque = deque()
        self.queued_ids: set = set()
        self.decided_ids: OrderedDict = OrderedDict()
        self.flush_scheduled = False
        self.ticking = False
        self.watchdog = False
        self.propose_times: OrderedDict[int, float] = OrderedDict()
        mode, fixed = parse_compensation(self.cfg.compensation)
        self.ledger = SkipLedger(lam=self.cfg.lam if self.cfg.lam > 0 else 1.0,
                                 delta_t=self.cfg.delta_t, t_ref=self.cfg.t_ref)
        self.pacer = Pacer(self.ledger, mode, fixed,
                           DelayEstimator(static=self.cfg.static_delay,
                                          aggregate=self.cfg.delay_aggregate))
        self.acks_enabled = mode in ("auto", "neg-auto") and self.cfg.static_delay is None

    # -- topology ---------------------------------------------------------

    @property
    def is_acceptor(self) -> bool:
        return "acceptor" in self.roles

    @property
    def is_learner(self) -> bool:
        return "learner" in self.roles

    @property
    def is_coordinator(self) -> bool:
        return self.coordinator == self.host.nid

    def quorum(self) -> int:
        return self.view.quorum_of(self.group)

    def install_view(self, view: TopologyView, bootstrap: bool = False) -> None:
        old_nodes = [m.node for m in self.members]
        self.view = view
        if view.t_ref is not None:
            # deployments with real clocks share the registry's reference time
            self.ledger.t_ref = view.t_ref
        self.members = view.rings.get(self.group, ())
        nodes = [m.node for m in self.members]
        me = self.host.nid
        # a process never takes a role it was not started with, whatever the view says
        self.roles = view.roles_of(self.group, me) & self.host.roles
        self.successor = view.successor(self.group, me) if me in nodes else None
        try:
            coord = elect_coordinator(view, self.group)
        except Exception:
            coord = None
        was = self.is_coordinator
        self.coordinator = coord
        if me not in nodes:
            self._step_down()
            return
        if coord != me:
            if was:
                self._step_down()
            return
        removed = bool(set(old_nodes) - set(nodes))
        if bootstrap and not was and self.max_round == 0 and not self.acceptor.accepted:
            # round 0 belongs to the coordinator of the bootstrap view
            self.ballot = Ballot(0, me)
            self.acceptor.promised = max(self.acceptor.promised, self.ballot)
            self.prepared = True
            self.next_instance = 0
            self._start_coordinating()
        elif not was or removed or not (self.prepared or self.preparing):
            self.prepared = False
            self.ledger.pending_slots = 0
            self.prepare_range(self.next_deliver)
            self._start_coordinating()

    def _start_coordinating(self) -> None:
        if self.cfg.pacing and self.cfg.lam > 0 and not self.ticking:
            self.ticking = True
            now = self.host.now()
            dt = self.cfg.delta_t
            t_ref = self.ledger.t_ref
            k = int((now - t_ref) / dt) + 1
            self.host.after(t_ref + k * dt - now, self._tick)
        if not self.watchdog:
            self.watchdog = True
            self.host.after(self.cfg.decision_timeout / 2, self._watch)

    def _step_down(self) -> None:
        self.prepared = False
        self.preparing = None
        self.ballot = None
        self.inflight.clear()
        self.propose_times.clear()
        self.ledger.pending_slots = 0
        # hand queued client values to whoever coordinates now
        queued = list(self.queue)
        self.queue.clear()
        self.queued_ids.clear()
        if self.coordinator is not None and self.coordinator != self.host.nid:
            for payload in queued:
                self.host.send(self.coordinator,
                               Frame(wire.CLIENT_SUBMIT, self.group, value=Value.app([payload])))

    # -- frame dispatch ---------------------------------------------------

    def on_frame(self, src: int, f: Frame) -> None:
        kind = f.kind
        if kind == wire.PHASE2:
            self.on_phase2(f)
        elif kind == wire.DECISION:
            self.on_decision_frame(f)
        elif kind == wire.PHASE1A:
            self.on_phase1a(f)
        elif kind == wire.PHASE1B:
            self.on_phase1b(f)
        elif kind == wire.NACK:
            self.on_nack(f)
        elif kind == wire.CLIENT_SUBMIT:
            self.on_submit(f)
        elif kind == wire.FETCH:
            self.on_fetch(src, f)
        elif kind == wire.FETCH_REPLY:
            self.on_fetch_reply(f)
        elif kind == wire.DECISION_ACK:
            self.on_ack(src, f)

    def _in_ring(self, node: int) -> bool:
        return any(m.node == node for m in self.members)

    def _forward(self, f: Frame) -> None:
        succ = self.successor
        if succ is not None and succ != self.host.nid:
            self.host.send(succ, f)

    # -- phase 2 ----------------------------------------------------------

    def on_phase2(self, f: Frame) -> None:
        if self.successor is None or not self._in_ring(f.ballot.node):
            return
        b, i, value = f.ballot, f.instance, f.value
        votes = f.votes
        if self.is_acceptor:
            acc = self.acceptor
            if b < acc.promised:
                self.host.send(b.node, Frame(wire.NACK, self.group, acc.promised, i))
                return
            prev = acc.accepted.get(i)
            if prev is not None and prev[0] == b:
                return  # already voted for this (ballot, instance)
            if i < self.low_retained:
                return
            acc.accept(b, i, value)
            self.host.storage_write(value)
            votes += 1
        elif b.node == self.host.nid:
            return
        if votes >= self.quorum():
            self.learn(i, value, b)
            self._forward(Frame(wire.DECISION, self.group, b, i, votes, value))
        else:
            self._forward(Frame(wire.PHASE2, self.group, b, i, votes, value))

    def on_decision_frame(self, f: Frame) -> None:
        if self.successor is None:
            return
        known = self.decided.get(f.instance)
        if known is not None and known[1] == f.ballot:
            return
        self.learn(f.instance, f.value, f.ballot)
        self._forward(f)

    # -- learning ---------------------------------------------------------

    def learn(self, i: int, value: Value, ballot: Ballot) -> bool:
        known = self.decided.get(i)
        if known is not None:
            if known[0] != value:
                self.host.trace.conflict(self.group, i, self.host.nid)
            self.decided[i] = (known[0], max(known[1], ballot))
            # a re-proposal of an instance we already knew has now completed
            self.inflight.pop(i, None)
            return False
        if i < self.next_deliver and not self.passthrough:
            return False
        self.decided[i] = (value, ballot)
        self.host.trace.decided(self.group, i, value)
        if i > self.max_known:
            self.max_known = i
        pending = False
        entry = self.inflight.pop(i, None)
        if entry is not None:
            pending = entry[2]
        if value.is_skip:
            self.ledger.record_decided(skip_slots=value.skip_count, was_pending=pending)
        else:
            self.ledger.record_decided(app_slots=len(value.payloads), was_pending=pending)
            ids = self.decided_ids
            for p in value.payloads:
                mid, _ = unwrap(p)
                if mid is not None:
                    ids[mid] = None
            while len(ids) > 200000:
                ids.popitem(last=False)
        if (self.acks_enabled and self.is_learner and i % self.cfg.ack_every == 0
                and ballot.node != self.host.nid):
            self.host.send(ballot.node, Frame(wire.DECISION_ACK, self.group, ballot, i,
                                              aux=self.host.clock.now()))
        if self.passthrough:
            self.host.deliver_decision(self.group, i, value)
            self.next_deliver = max(self.next_deliver, i + 1)
        else:
            self._drain()
        if self.is_coordinator and self.queue:
            self._schedule_flush()
        return True

    def _drain(self) -> None:
        nd = self.next_deliver
        decided = self.decided
        while nd in decided:
            self.host.deliver_decision(self.group, nd, decided[nd][0])
            nd += 1
        self.next_deliver = nd
        if nd - self.low_retained > self.cfg.retain_window + 1024:
            self._trim(nd - self.cfg.retain_window)
        if self.max_known >= nd and self.is_learner and not self.gap_pending:
            self.gap_pending = True
            self.host.after(self.cfg.gap_timeout, self._check_gap, nd)

    def _trim(self, below: int) -> None:
        for i in [i for i in self.decided if i < below]:
            del self.decided[i]
        self.acceptor.trim_below(below)
        self.low_retained = below

    def go_live(self, next_instance: int) -> None:
        """Leave pass-through mode; deliver in order from ``next_instance``."""
        self.passthrough = False
        self.next_deliver = next_instance
        for i in [i for i in self.decided if i < next_instance]:
            del self.decided[i]
        self._drain()

    def _check_gap(self, at: int) -> None:
        self.gap_pending = False
        if self.passthrough or self.next_deliver > at or self.max_known < self.next_deliver:
            if self.max_known >= self.next_deliver:
                self._drain()
            return
        if not self.host.fetch_allowed():
            return
        first = self.next_deliver
        last = min(self.max_known, first + self.cfg.fetch_chunk - 1)
        # ask an acceptor other than ourselves, rotating between attempts
        peers = [n for n in self.view.acceptors(self.group) if n != self.host.nid]
        if peers:
            target = peers[self.gap_requests % len(peers)]
            self.gap_requests += 1
            self.host.count_fetch(self.group, first, last)
            self.host.send(target, Frame(wire.FETCH, self.group, ZERO_BALLOT, first, aux=last))
        self.gap_pending = True
        self.host.after(self.cfg.gap_timeout, self._check_gap, first)

    def _behind(self, first: int, holder: int) -> None:
        """A new coordinator prepared from ``first``, so it holds every decision below it.

        Decisions lost with a crashed ring member would otherwise only show up
        as a gap once new ones arrive, a gap timeout later.
        """
        if not self.is_learner or self.passthrough or first <= self.next_deliver:
            return
        self.max_known = max(self.max_known, first - 1)
        if holder == self.host.nid or not self.host.fetch_allowed():
            return
        lo = self.next_deliver
        hi = min(first - 1, lo + self.cfg.fetch_chunk - 1)
        self.host.count_fetch(self.group, lo, hi)
        self.host.send(holder, Frame(wire.FETCH, self.group, ZERO_BALLOT, lo, aux=hi))
        if not self.gap_pending:
            self.gap_pending = True
            self.host.after(self.cfg.gap_timeout, self._check_gap, lo)

    # -- fetch (gap fill and log-tail recovery) ---------------------------

    def fetch_decisions(self, first: int, last: int) -> list:
        """Decided values for ``[first, last]``; raises Trimmed / Undecided."""
        if first < self.low_retained:
            raise Trimmed(f"ring {self.group}: {first} below retained {self.low_retained}")
        out = []
        for i in range(first, last + 1):
            d = self.decided.get(i)
            if d is None:
                raise Undecided(f"ring {self.group}: instance {i} undecided")
            out.append(Decision(self.group, i, d[0]))
        return out

    def on_fetch(self, src: int, f: Frame) -> None:
        first, last = f.instance, f.aux if f.aux is not None else f.instance
        self.host.serve_fetch(last - first + 1)
        for i in range(first, last + 1):
            if i < self.low_retained:
                self.host.send(src, Frame(wire.FETCH_REPLY, self.group, ZERO_BALLOT, i, wire.FETCH_TRIMMED))
                return
            d = self.decided.get(i)
            if d is None:
                self.host.send(src, Frame(wire.FETCH_REPLY, self.group, ZERO_BALLOT, i, wire.FETCH_UNDECIDED))
                return
            self.host.send(src, Frame(wire.FETCH_REPLY, self.group, d[1], i, wire.FETCH_OK, d[0]))

    def on_fetch_reply(self, f: Frame) -> None:
        if self.host.recovery_fetch_reply(self.group, f):
            return
        if f.votes == wire.FETCH_OK and f.value is not None:
            self.learn(f.instance, f.value, f.ballot)

    # -- phase 1 ----------------------------------------------------------

    def prepare_range(self, first: int) -> Ballot:
        if not self.is_coordinator:
            raise NotCoordinator(f"node {self.host.nid} is not coordinator of ring {self.group}")
        me = self.host.nid
        self.max_round += 1
        b = Ballot(self.max_round, me)
        p = _Prepare(b, first, self.host.now())
        self.preparing = p
        self.prepared = False
        # undecided proposals are re-proposed once the new ballot is promised
        self.inflight.clear()
        votes = 0
        if self.is_acceptor and b > self.acceptor.promised:
            self.acceptor.promised = b
            votes = 1
            for i, (ab, v) in self.acceptor.accepted.items():
                if i >= first:
                    p.adopted[i] = (ab, v)
        log.debug("node %s ring %s prepare %s from %s", me, self.group, b, first)
        self.host.trace.event("prepare", f"ring={self.group} node={me} ballot={b.round}.{b.node} from={first}")
        if votes >= self.quorum():
            self._finish_prepare(p)
        else:
            self._forward(Frame(wire.PHASE1A, self.group, b, first, votes))
        self.host.after(self.cfg.prepare_timeout, self._prepare_timeout, b)
        return b

    def _prepare_timeout(self, b: Ballot) -> None:
        if self.preparing is not None and self.preparing.ballot == b and self.is_coordinator:
            self.prepare_range(self.next_deliver)

    def on_phase1a(self, f: Frame) -> None:
        b = f.ballot
        me = self.host.nid
        if b.node == me:
            p = self.preparing
            if p is not None and p.ballot == b and f.votes >= self.quorum():
                self._finish_prepare(p)
            return
        if self.successor is None or not self._in_ring(b.node):
            return
        self.max_round = max(self.max_round, b.round)
        self._behind(f.instance, b.node)
        votes = f.votes
        if self.is_acceptor:
            acc = self.acceptor
            if b <= acc.promised:
                if b < acc.promised:
                    self.host.send(b.node, Frame(wire.NACK, self.group, acc.promised, f.instance))
                return
            acc.promised = b
            votes += 1
            for i in sorted(acc.accepted):
                if i >= f.instance:
                    ab, v = acc.accepted[i]
                    self._forward(Frame(wire.PHASE1B, self.group, b, i, 0, v, ab))
        self._forward(Frame(wire.PHASE1A, self.group, b, f.instance, votes))

    def on_phase1b(self, f: Frame) -> None:
        b = f.ballot
        if b.node == self.host.nid:
            p = self.preparing
            if p is not None and p.ballot == b:
                prev = p.adopted.get(f.instance)
                if prev is None or f.aux > prev[0]:
                    p.adopted[f.instance] = (f.aux, f.value)
            return
        if self.successor is None or not self._in_ring(b.node):
            return
        self._forward(f)

    def _finish_prepare(self, p: _Prepare) -> None:
        self.preparing = None
        self.ballot = p.ballot
        self.prepared = True
        hi = max(p.adopted, default=p.first - 1)
        hi = max(hi, max((i for i in self.decided if i >= p.first), default=hi))
        self.next_instance = p.first
        self.host.trace.event("prepared", f"ring={self.group} node={self.host.nid} "
                                          f"ballot={p.ballot.round}.{p.ballot.node} upto={hi}")
        self.pacer.take_over(self.host.clock.now())
        for i in range(p.first, hi + 1):
            d = self.decided.get(i)
            if d is not None:
                value = d[0]
            elif i in p.adopted:
                value = p.adopted[i][1]
            else:
                value = Value.skip(1)
            if not value.is_skip:
                for payload in value.payloads:
                    mid, _ = unwrap(payload)
                    if mid is not None:
                        self.decided_ids[mid] = None
            self._propose_at(i, value, paced=False)
        self.next_instance = max(self.next_instance, hi + 1)
        self._schedule_flush()

    def on_nack(self, f: Frame) -> None:
        self.max_round = max(self.max_round, f.ballot.round)
        if not self.is_coordinator:
            return
        mine = self.preparing.ballot if self.preparing else self.ballot
        if mine is not None and f.ballot > mine:
            self.host.trace.event("preempted", f"ring={self.group} node={self.host.nid} by={f.ballot.round}.{f.ballot.node}")
            self.prepared = False
            self.preparing = None
            self.inflight.clear()
            # back off a little so competing coordinators settle
            self.host.after(self.cfg.prepare_timeout / 4, self._retry_prepare)

    def _retry_prepare(self) -> None:
        if self.is_coordinator and not self.prepared and self.preparing is None:
            self.prepare_range(self.next_deliver)

    def check_preempted(self, ballot: Ballot) -> None:
        if self.ballot is not None and ballot > self.ballot:
            raise Preempted(ballot)

    # -- proposing --------------------------------------------------------

    def propose(self, value: Value, paced: bool = False) -> int:
        """Assign ``value`` to the next instance and start its circulation."""
        if not self.is_coordinator:
            raise NotCoordinator(f"node {self.host.nid} is not coordinator of ring {self.group}")
        if not self.prepared:
            raise NoPromisedRange(f"ring {self.group}: no promised range")
        i = self.next_instance
        self.next_instance += 1
        self._propose_at(i, value, paced)
        return i

    def _propose_at(self, i: int, value: Value, paced: bool) -> None:
        b = self.ballot
        self.inflight[i] = (value, self.host.now(), paced)
        if self.acks_enabled:
            self.propose_times[i] = self.host.clock.now()
            while len(self.propose_times) > 4096:
                self.propose_times.popitem(last=False)
        votes = 0
        if self.is_acceptor:
            if b < self.acceptor.promised:
                return
            self.acceptor.accept(b, i, value)
            self.host.storage_write(value)
            votes = 1
        if votes >= self.quorum():
            self.learn(i, value, b)
            self._forward(Frame(wire.DECISION, self.group, b, i, votes, value))
        else:
            self._forward(Frame(wire.PHASE2, self.group, b, i, votes, value))

    def window_full(self) -> bool:
        return len(self.inflight) >= self.cfg.window

    def on_submit(self, f: Frame) -> None:
        if not self.is_coordinator:
            if self.coordinator is not None and self.coordinator != self.host.nid:
                self.host.send(self.coordinator, f)
            return
        if f.value is None or f.value.is_skip:
            return
        for payload in f.value.payloads:
            mid, _ = unwrap(payload)
            if mid is not None:
                if mid in self.decided_ids or mid in self.queued_ids:
                    continue
                self.queued_ids.add(mid)
            self.queue.append(payload)
        self._schedule_flush()

    def _schedule_flush(self) -> None:
        if not self.flush_scheduled and self.queue:
            self.flush_scheduled = True
            self.host.after_cpu(self._flush)

    def _flush(self) -> None:
        self.flush_scheduled = False
        if not (self.is_coordinator and self.prepared):
            return
        q = self.queue
        limit = self.cfg.batch_max_bytes
        ids = self.decided_ids
        while q and not self.window_full():
            batch = []
            size = 0
            while q and (not batch or size + len(q[0]) + 4 <= limit):
                p = q.popleft()
                mid, _ = unwrap(p)
                self.queued_ids.discard(mid)
                # a resubmission whose original got decided while it waited here
                if mid is not None and mid in ids:
                    continue
                if mid is not None:
                    ids[mid] = None
                batch.append(p)
                size += len(p) + 4
            if batch:
                self.propose(Value.app(batch))

    # -- pacing -----------------------------------------------------------

    def _tick(self) -> None:
        if not self.is_coordinator:
            self.ticking = False
            return
        self.host.after(self.cfg.delta_t, self._tick)
        if not self.prepared or self.window_full():
            return
        self.pacer.on_tick(self.host.clock.now(), True,
                           lambda n: self.propose(Value.skip(n), paced=True))

    def on_ack(self, src: int, f: Frame) -> None:
        t0 = self.propose_times.get(f.instance)
        if t0 is None or not self.is_coordinator:
            return
        self.pacer.estimator.add(f.aux - t0, source=src)

    def _watch(self) -> None:
        if not self.is_coordinator:
            self.watchdog = False
            return
        self.host.after(self.cfg.decision_timeout / 2, self._watch)
        if not self.prepared:
            return
        now = self.host.now()
        for i, (_, t, _) in self.inflight.items():
            if now - t > self.cfg.decision_timeout:
                self.host.trace.event("decision-timeout", f"ring={self.group} node={self.host.nid} instance={i}")
                self.prepare_range(self.next_deliver)
            break
