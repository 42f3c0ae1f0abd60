from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpaxos import harness, metrics
from mrpaxos.core import Ballot, Value
from mrpaxos.errors import NotCoordinator, StaleBallot, Trimmed, Undecided
from mrpaxos.ring import AcceptorState

ACC = ["proposer", "acceptor"]


def one_ring(acceptors=3, learners=2, **extra):
    d = {
        "name": "one-ring",
        "duration": 1.5,
        "drain": 1.0,
        "rings": {"groups": [1]},
        "nodes": [{"id": 10 + k, "roles": ACC, "rings": [1]} for k in range(acceptors)]
        + [{"id": 100 + k, "roles": ["learner"], "rings": [1]} for k in range(learners)],
        "clients": [{"id": 200, "groups": [1], "mode": "open", "rate": 400, "payload": 64,
                     "resubmit_ms": 300}],
        "app": {"kind": "log"},
        "pacing": {"lambda": 1000, "delta_t_ms": 5},
    }
    d.update(extra)
    return d


def clean(result):
    return {k: v for k, v in result.check().items() if v}


def test_ballots_order_by_round_then_node():
    assert Ballot(2, 1) > Ballot(1, 9) > Ballot(1, 3)


def test_acceptor_refuses_lower_ballots():
    a = AcceptorState()
    a.accept(Ballot(2, 1), 0, Value.skip(1))
    with pytest.raises(StaleBallot):
        a.accept(Ballot(1, 5), 1, Value.skip(1))
    a.accept(Ballot(2, 1), 1, Value.skip(2))
    a.trim_below(1)
    assert list(a.accepted) == [1]


def test_failure_free_run_delivers_everything_everywhere():
    r = harness.run(one_ring(), 1)
    assert clean(r) == {}
    assert r.delivered[100] == r.delivered[101] == len(r.trace.submitted)
    assert r.trace.resubmits == 0


def test_frames_survive_the_codec():
    r = harness.run(one_ring(network={"codec_check": True}), 2)
    assert clean(r) == {}
    assert r.delivered[100] == len(r.trace.submitted)


def test_coordinator_crash_fails_over():
    r = harness.run(one_ring(faults=[{"at": 0.7, "kind": "crash", "node": 10}]), 3)
    assert clean(r) == {}
    assert r.cluster.coordinator(1) == 11
    late = [t for t, *_ in r.trace.deliveries[100] if t > 1.2]
    assert late, "no deliveries after failover"
    assert any(k == "prepared" and "node=11" in d for _, k, d in r.trace.events)


def test_losing_a_quorum_stops_decisions_but_stays_safe():
    faults = [{"at": 0.5, "kind": "crash", "node": 11}, {"at": 0.5, "kind": "crash", "node": 12}]
    r = harness.run(one_ring(faults=faults), 4)
    res = r.check(("agreement", "integrity", "order", "single-value"))
    assert not any(res.values())
    assert all(t < 0.6 for t, *_ in r.trace.deliveries[100])


def test_paused_acceptor_catches_up():
    r = harness.run(one_ring(faults=[{"at": 0.4, "kind": "pause", "node": 12, "duration": 0.3}]), 5)
    res = r.check(("agreement", "integrity", "order", "single-value", "validity"))
    assert not any(res.values())


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_lossy_links_are_masked(seed):
    r = harness.run(one_ring(network={"drop": 0.01}), seed)
    assert clean(r) == {}
    assert r.cluster.net.dropped_transmissions > 0


def test_idle_ring_is_paced_by_skips():
    d = one_ring(clients=[], duration=2.0, drain=0.0)
    r = harness.run(d, 1)
    slots = sum(v.slots for v in r.trace.decisions.values())
    assert 1995 <= slots <= 2005
    assert all(v.is_skip for v in r.trace.decisions.values())


def test_fetch_and_prepare_guards():
    r = harness.run(one_ring(), 1)
    eng = r.cluster.nodes[11].members[1]
    assert len(eng.fetch_decisions(0, 3)) == 4
    with pytest.raises(Undecided):
        eng.fetch_decisions(0, 10**9)
    eng.low_retained = 5
    with pytest.raises(Trimmed):
        eng.fetch_decisions(0, 3)
    with pytest.raises(NotCoordinator):
        eng.prepare_range(0)


def test_latency_equals_hop_sums_along_the_ring():
    # coordinator 10 (a) -> 11 (b) reaches the quorum, then the decision goes 12 (c) -> 100 (a) -> 101 (c)
    d = one_ring(duration=1.0, drain=0.5)
    regions = {10: "a", 11: "b", 12: "c", 100: "a", 101: "c"}
    for n in d["nodes"]:
        n["region"] = regions[n["id"]]
    d["links"] = [{"from": "a", "to": "b", "latency": "const:20"}, {"from": "b", "to": "c", "latency": "const:30"},
                  {"from": "a", "to": "c", "latency": "const:50"}, {"from": "a", "to": "a", "latency": "const:0.5"},
                  {"from": "c", "to": "c", "latency": "const:0.5"}]
    d["clients"] = [{"id": 200, "groups": [1], "mode": "open", "rate": 10, "payload": 100, "region": "a",
                     "start": 0.3}]
    r = harness.run(d, 1)
    expect = {100: 0.5 + 20 + 30 + 50, 101: 0.5 + 20 + 30 + 50 + 50}
    for n, ms in expect.items():
        lat = metrics.delivery_latencies(r.trace, [n])
        assert lat and all(x * 1000 == pytest.approx(ms) for x in lat)


def test_two_of_five_acceptors_down_still_decides():
    faults = [{"at": 0.5, "kind": "crash", "node": 13}, {"at": 0.5, "kind": "crash", "node": 14}]
    r = harness.run(one_ring(acceptors=5, faults=faults), 6)
    assert clean(r) == {}
    assert r.cluster.view().quorum_of(1) == 3
    assert any(t > 1.2 for t, *_ in r.trace.deliveries[100])


def test_lagging_learner_fills_its_gap():
    r = harness.run(one_ring(faults=[{"at": 0.5, "kind": "pause", "node": 101, "duration": 0.3}]), 7)
    assert clean(r) == {}
    # the pause outlasts suspicion, so 101 is dropped, rejoins and fetches what it missed
    assert r.trace.fetches[101] >= 1
    a = [(g, i, gs, mid) for _, g, i, gs, mid, _ in r.trace.deliveries[100]]
    b = [(g, i, gs, mid) for _, g, i, gs, mid, _ in r.trace.deliveries[101]]
    assert a == b
