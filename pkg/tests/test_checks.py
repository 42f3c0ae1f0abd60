from __future__ import annotations

import pytest

from mrpaxos import checks, harness
from mrpaxos.core import MessageId, Value

ACC = ["proposer", "acceptor"]


def two_ring_run(seed=3):
    sc = {
        "name": "two-rings",
        "duration": 0.6,
        "drain": 0.5,
        "rings": {"groups": [1, 2]},
        "nodes": [{"id": 10 + k, "roles": ACC, "rings": [1]} for k in range(3)]
        + [{"id": 20 + k, "roles": ACC, "rings": [2]} for k in range(3)]
        + [{"id": 100, "roles": ["learner"], "rings": [1, 2]},
           {"id": 101, "roles": ["learner"], "rings": [1, 2]}],
        "clients": [{"id": 200, "groups": [1, 2], "mode": "open", "rate": 300, "payload": 32}],
        "app": {"kind": "log"},
        "pacing": {"lambda": 1000, "delta_t_ms": 5},
    }
    return harness.run(sc, seed)


@pytest.fixture(scope="module")
def clean():
    return two_ring_run()


def violations(cluster):
    return {k: v for k, v in checks.check_all(cluster).items() if v}


def test_clean_run_has_no_violations(clean):
    assert len(clean.trace.deliveries[100]) > 100
    assert violations(clean.cluster) == {}


@pytest.fixture
def run():
    return two_ring_run()


def test_duplicate_delivery_breaks_integrity(run):
    recs = run.trace.deliveries[100]
    recs.append(recs[5])
    assert "integrity" in violations(run.cluster)


def test_forged_message_breaks_integrity(run):
    t, g, inst, gs, _, nb = run.trace.deliveries[100][0]
    run.trace.deliveries[100][0] = (t, g, inst, gs, MessageId(999, 0), nb)
    assert "integrity" in violations(run.cluster)


def test_missing_delivery_breaks_agreement(run):
    del run.trace.deliveries[101][10]
    assert set(violations(run.cluster)) == {"agreement"}


def test_opposite_orders_form_a_cycle(run):
    a = run.trace.deliveries[100]
    b = run.trace.deliveries[101]
    i = next(k for k in range(len(a) - 1) if a[k][1] != a[k + 1][1])
    j = [r[4] for r in b].index(a[i][4])
    b[j], b[j + 1] = b[j + 1], b[j]
    assert "order" in violations(run.cluster)


def test_conflicting_decision_is_reported(run):
    (g, i), v = next(iter(run.trace.decisions.items()))
    run.trace.decided(g, i, Value.skip(v.slots + 1))
    assert set(violations(run.cluster)) == {"single-value"}


def test_lost_message_breaks_validity(run):
    run.trace.submit(MessageId(200, 10_000), 1)
    assert "validity" in violations(run.cluster)


def test_diverged_state_is_reported(run):
    run.trace.state_hashes[101] = "0" * 64
    assert set(violations(run.cluster)) == {"state"}


def test_off_ring_hop_is_reported(run):
    run.cluster.net.ring_violations.append((0.1, 10, 12, 3, 1))
    assert set(violations(run.cluster)) == {"ring-integrity"}
