from __future__ import annotations

import pytest

from mrpaxos import harness
from mrpaxos.scenarios_gen import recovery


def short_recovery(protocol, seed=1):
    d = recovery(protocol, rate=400.0, duration=5.0, crash_at=1.5, restart_at=3.0)
    d["checkpoint"]["period"] = 1.0
    return harness.run(d, seed)


@pytest.fixture(scope="module", params=["new", "old"])
def recovered(request):
    return request.param, short_recovery(request.param)


def test_recovered_replica_matches_the_others(recovered):
    _, r = recovered
    assert {k: v for k, v in r.check().items() if v} == {}
    hashes = r.trace.state_hashes
    assert hashes[102] == hashes[100] == hashes[101]
    assert 102 in r.trace.recovered and 102 in r.trace.resumed


def test_checkpoints_were_written(recovered):
    _, r = recovered
    kinds = [k for _, k, _ in r.trace.events]
    assert kinds.count("checkpoint") >= 3
    assert "live" in kinds


def test_only_the_old_protocol_fetches(recovered):
    protocol, r = recovered
    fetches = r.trace.recovery_fetches.get(102, 0)
    if protocol == "new":
        assert fetches == 0
    else:
        assert fetches > 0 and sum(r.trace.fetch_served.values()) > 0


def test_recovered_replica_keeps_delivering(recovered):
    _, r = recovered
    live = next(t for t, k, d in r.trace.events if k == "live" and d.startswith("node=102"))
    after = [rec for rec in r.trace.deliveries[102] if rec[0] > live and rec[4] is not None]
    assert len(after) > 100


def test_crashed_client_messages_may_be_lost_but_never_duplicated():
    d = recovery("new", rate=400.0, duration=2.0, crash_at=1.0, restart_at=1.5)
    d["faults"] = [{"at": 1.0, "kind": "crash", "node": 2001}]
    r = harness.run(d, 2)
    assert not any(r.check(("integrity", "agreement", "order", "validity")).values())
    assert max(t for t, *_ in r.trace.deliveries[100]) < 1.2
