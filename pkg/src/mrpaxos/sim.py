"""Seeded discrete-event simulation: virtual clock, latency models, FIFO links.

Everything that happens in a simulated run is an event on one heap ordered by
``(fire_time, sequence)``, and all randomness comes from one
``random.Random(seed)``, so a run is a pure function of its configuration and
seed.
"""
from __future__ import annotations

import heapq
import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import HorizonExceeded, InvalidScenario
from .wire import RING_KINDS, decode, encode

log = logging.getLogger(__name__)


class Simulator:
    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng = random.Random(seed)
        self._heap: list = []
        self._seq = 0
        self.events_run = 0

    def at(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            t = self.now
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + max(0.0, delay), fn, *args)

    def every(self, period: float, fn: Callable, *args, start: Optional[float] = None) -> None:
        """Call ``fn`` every ``period`` seconds while it does not return False."""

        def tick():
            if fn(*args) is not False:
                self.after(period, tick)

        self.at(self.now + period if start is None else start, tick)

    def pending(self) -> int:
        return len(self._heap)

    def run_until(self, t_end: float, max_events: Optional[int] = None) -> None:
        heap = self._heap
        pop = heapq.heappop
        budget = max_events
        while heap and heap[0][0] <= t_end:
            t, _, fn, args = pop(heap)
            self.now = t
            fn(*args)
            self.events_run += 1
            if budget is not None:
                budget -= 1
                if budget <= 0:
                    raise HorizonExceeded(f"event budget exhausted at t={t:.3f}")
        if self.now < t_end:
            self.now = t_end

    def run_until_quiet(self, horizon: float, quiet: Callable[[], bool],
                        check_every: float = 0.05) -> float:
        """Advance until ``quiet()`` holds; HorizonExceeded past ``horizon``."""
        while not quiet():
            if self.now >= horizon:
                raise HorizonExceeded(f"not quiescent by t={horizon}")
            self.run_until(min(horizon, self.now + check_every))
        return self.now


# -- latency models ----------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    value: float

    def sample(self, rng: random.Random) -> float:
        return self.value

    @property
    def mean(self) -> float:
        return self.value


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: random.Random) -> float:
        return rng.uniform(self.low, self.high)

    @property
    def mean(self) -> float:
        return (self.low + self.high) / 2


@dataclass(frozen=True)
class Normal:
    """Normal distribution truncated at zero."""

    mu: float
    sigma: float

    def sample(self, rng: random.Random) -> float:
        return max(0.0, rng.gauss(self.mu, self.sigma))

    @property
    def mean(self) -> float:
        return self.mu


def parse_latency(spec) -> object:
    """``const:X``, ``uniform:A,B`` or ``normal:MU,SIGMA`` in milliseconds; a bare number is constant."""
    if isinstance(spec, (int, float)):
        return Constant(float(spec) / 1000.0)
    s = str(spec).strip().lower()
    name, _, args = s.partition(":")
    try:
        nums = [float(x) / 1000.0 for x in args.split(",")] if args else []
        if name in ("const", "constant") and len(nums) == 1:
            return Constant(nums[0])
        if name == "uniform" and len(nums) == 2 and nums[0] <= nums[1]:
            return Uniform(*nums)
        if name == "normal" and len(nums) == 2:
            return Normal(*nums)
        if not args:
            return Constant(float(name) / 1000.0)
    except ValueError:
        pass
    raise InvalidScenario(f"bad latency spec {spec!r}")


@dataclass
class LinkSpec:
    src: object
    dst: object
    latency: object
    drop_probability: float = 0.0


class SimNetwork:
    """Reliable FIFO links over a lossy, delayed medium.

    Each frame's one-way delay is sampled from the link's latency model.  A
    dropped transmission is retransmitted after ``rto``, possibly several
    times, and arrivals on one link never overtake each other.  Frames to a
    crashed node, or to an incarnation that has since crashed, are discarded.
    """

    def __init__(self, sim: Simulator, default_latency=Constant(0.0001), rto: float = 0.01,
                 codec_check: bool = False):
        self.sim = sim
        self.default = LinkSpec(None, None, default_latency, 0.0)
        self.rto = rto
        self.codec_check = codec_check
        self.endpoints: dict = {}
        self.region: dict = {}
        self.links: dict = {}
        self.region_links: dict = {}
        self._last_arrival: dict = {}
        self.sent = 0
        self.dropped_transmissions = 0
        self.bytes_sent = 0
        self.ring_violations: list = []
        self.audit: Optional[Callable] = None

    def attach(self, node_id, endpoint, region=None) -> None:
        self.endpoints[node_id] = endpoint
        if region is not None:
            self.region[node_id] = region

    def set_link(self, spec: LinkSpec) -> None:
        self.links[(spec.src, spec.dst)] = spec

    def set_region_link(self, a, b, latency, drop: float = 0.0, symmetric: bool = True) -> None:
        self.region_links[(a, b)] = LinkSpec(a, b, latency, drop)
        if symmetric:
            self.region_links[(b, a)] = LinkSpec(b, a, latency, drop)

    def link(self, src, dst) -> LinkSpec:
        spec = self.links.get((src, dst))
        if spec is not None:
            return spec
        ra, rb = self.region.get(src), self.region.get(dst)
        if ra is not None and rb is not None:
            spec = self.region_links.get((ra, rb))
            if spec is not None:
                return spec
        return self.default

    def send(self, src, dst, frame, depart: Optional[float] = None) -> None:
        sim = self.sim
        t0 = sim.now if depart is None else max(depart, sim.now)
        if self.audit is not None and frame.kind in RING_KINDS and not self.audit(src, dst, frame):
            self.ring_violations.append((t0, src, dst, frame.kind, frame.group))
        if self.codec_check:
            frame = decode(encode(frame))
        spec = self.link(src, dst)
        rng = sim.rng
        delay = spec.latency.sample(rng)
        if spec.drop_probability > 0.0:
            while rng.random() < spec.drop_probability:
                self.dropped_transmissions += 1
                delay += self.rto
        arrival = t0 + delay
        key = (src, dst)
        last = self._last_arrival.get(key, -math.inf)
        if arrival < last:
            arrival = last
        self._last_arrival[key] = arrival
        self.sent += 1
        ep = self.endpoints.get(dst)
        if ep is None:
            return
        sim.at(arrival, self._deliver, src, dst, ep.incarnation, frame)

    def _deliver(self, src, dst, incarnation, frame) -> None:
        ep = self.endpoints.get(dst)
        if ep is None or not ep.alive or ep.incarnation != incarnation:
            return
        ep.receive(src, frame)

    def crashed(self, node_id, detect_after: float) -> None:
        """Peers that had a link to ``node_id`` get ``on_link_down`` after ``detect_after``."""
        peers = sorted({src for (src, dst) in self._last_arrival if dst == node_id}, key=repr)
        inc = self.endpoints[node_id].incarnation if node_id in self.endpoints else None
        for p in peers:
            self.sim.after(detect_after, self._link_down, p, node_id, inc)

    def _link_down(self, peer, node_id, incarnation) -> None:
        ep = self.endpoints.get(peer)
        target = self.endpoints.get(node_id)
        if ep is None or not ep.alive:
            return
        if target is not None and target.alive and target.incarnation != incarnation:
            return
        handler = getattr(ep, "on_link_down", None)
        if handler is not None:
            handler(node_id)

    def reset_links_of(self, node_id) -> None:
        """Forget FIFO state of a node's links (its connections were torn down)."""
        for key in [k for k in self._last_arrival if node_id in k]:
            del self._last_arrival[key]
