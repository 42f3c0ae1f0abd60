from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpaxos.errors import HorizonExceeded, InvalidScenario
from mrpaxos.sim import Constant, LinkSpec, Normal, SimNetwork, Simulator, Uniform, parse_latency
from mrpaxos.wire import HEARTBEAT, Frame


def test_events_fire_in_time_then_insertion_order():
    sim = Simulator()
    seen = []
    sim.at(2.0, seen.append, "c")
    sim.at(1.0, seen.append, "a")
    sim.at(1.0, seen.append, "b")
    sim.run_until(5.0)
    assert seen == ["a", "b", "c"]
    assert sim.now == 5.0


def test_past_times_clamp_to_now_and_every_stops_on_false():
    sim = Simulator()
    sim.run_until(1.0)
    ticks = []

    def tick():
        ticks.append(sim.now)
        return len(ticks) < 3

    sim.every(0.5, tick)
    late = []
    sim.at(0.2, lambda: late.append(sim.now))
    sim.run_until(10.0)
    assert late == [1.0]
    assert ticks == [1.5, 2.0, 2.5]


def test_event_budget():
    sim = Simulator()
    sim.every(0.001, lambda: None)
    with pytest.raises(HorizonExceeded):
        sim.run_until(1.0, max_events=10)


def test_run_until_quiet():
    sim = Simulator()
    flag = []
    sim.at(0.3, flag.append, 1)
    assert sim.run_until_quiet(1.0, lambda: bool(flag)) >= 0.3
    with pytest.raises(HorizonExceeded):
        Simulator().run_until_quiet(0.2, lambda: False)


def test_latency_specs():
    assert parse_latency("const:2").mean == pytest.approx(0.002)
    u = parse_latency("uniform:1,3")
    assert isinstance(u, Uniform) and u.mean == pytest.approx(0.002)
    n = parse_latency("normal:10,1")
    assert isinstance(n, Normal)
    rng = random.Random(0)
    assert all(x >= 0 for x in (n.sample(rng) for _ in range(1000)))
    assert parse_latency(3) == Constant(0.003)
    with pytest.raises(InvalidScenario):
        parse_latency("gamma:1")


class Sink:
    def __init__(self, sim):
        self.sim = sim
        self.alive = True
        self.incarnation = 0
        self.got = []
        self.down = []

    def receive(self, src, frame):
        self.got.append((self.sim.now, src, frame.instance))

    def on_link_down(self, peer):
        self.down.append(peer)


def pair(drop=0.0, latency="uniform:1,5", seed=0):
    sim = Simulator(seed)
    net = SimNetwork(sim, parse_latency(latency), rto=0.01)
    a, b = Sink(sim), Sink(sim)
    net.attach(1, a)
    net.attach(2, b)
    if drop:
        net.set_link(LinkSpec(1, 2, parse_latency(latency), drop))
    return sim, net, a, b


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.01, 0.3]))
def test_links_are_reliable_and_fifo(seed, drop):
    sim, net, _, b = pair(drop, seed=seed)
    for i in range(200):
        sim.at(i * 0.0005, net.send, 1, 2, Frame(HEARTBEAT, instance=i))
    sim.run_until(60.0)
    assert [i for _, _, i in b.got] == list(range(200))
    times = [t for t, _, _ in b.got]
    assert times == sorted(times)
    if drop == 0.0:
        assert net.dropped_transmissions == 0


def test_drops_cost_retransmission_timeouts():
    sim, net, _, b = pair(latency="const:1", seed=4)
    net.set_link(LinkSpec(1, 2, Constant(0.001), 0.5))
    for i in range(400):
        net.send(1, 2, Frame(HEARTBEAT, instance=i))
    sim.run_until(100.0)
    assert len(b.got) == 400
    # about one retransmission per frame at a 50% drop rate
    assert 250 < net.dropped_transmissions < 600


def test_region_links_and_crash_detection():
    sim = Simulator()
    net = SimNetwork(sim, Constant(0.001))
    a, b = Sink(sim), Sink(sim)
    net.attach(1, a, region="east")
    net.attach(2, b, region="west")
    net.set_region_link("east", "west", Constant(0.05))
    assert net.link(2, 1).latency.mean == pytest.approx(0.05)
    net.send(1, 2, Frame(HEARTBEAT))
    sim.run_until(0.01)
    b.alive = False
    net.crashed(2, 0.1)
    sim.run_until(1.0)
    assert b.got == [] and a.down == [2]


def test_frames_to_old_incarnation_are_discarded():
    sim, net, _, b = pair(latency="const:10")
    net.send(1, 2, Frame(HEARTBEAT))
    b.incarnation += 1
    sim.run_until(1.0)
    assert b.got == []
