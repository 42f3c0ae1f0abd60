"""Parameterised scenario families, addressable by name.

``generate("skew-8rings")`` returns the scenario dict that
:func:`mrpaxos.scenario.load` accepts.  Node and client counts, latencies and
CPU costs are scaled-down stand-ins chosen so each run takes seconds.
"""
from __future__ import annotations

import random
import re
from typing import Optional

ACC = ["proposer", "acceptor"]
LRN = ["learner"]

# one-way delays between five regions, milliseconds
REGIONS = ["us-west-1", "us-west-2", "eu-west-1", "ap-southeast-1", "ap-southeast-2"]
GEO_DELAY_MS = {
    ("us-west-1", "us-west-2"): 20,
    ("us-west-1", "eu-west-1"): 70,
    ("us-west-1", "ap-southeast-1"): 90,
    ("us-west-1", "ap-southeast-2"): 75,
    ("us-west-2", "eu-west-1"): 65,
    ("us-west-2", "ap-southeast-1"): 85,
    ("us-west-2", "ap-southeast-2"): 80,
    ("eu-west-1", "ap-southeast-1"): 90,
    ("eu-west-1", "ap-southeast-2"): 140,
    ("ap-southeast-1", "ap-southeast-2"): 50,
}
INTRA_REGION_MS = 0.5


def mean_inter_region_delay() -> float:
    """Seconds."""
    return sum(GEO_DELAY_MS.values()) / len(GEO_DELAY_MS) / 1000.0


def _ring(g: int, base: int, acceptors: int = 3) -> list[dict]:
    return [{"id": base + k, "roles": ACC, "rings": [g]} for k in range(acceptors)]


def skew(n_rings: int, duration: float = 4.0, rate: float = 200.0, lam: float = 1000.0,
         delta_t_ms: float = 5.0, cpu: bool = True) -> dict:
    """Ring 1 carries all traffic, the other rings are idle.

    Learner 1001 subscribes to ring 1 only, learner 1002 to every ring, so
    the latency difference between the two is the cost of merging idle rings.
    """
    nodes = []
    for g in range(1, n_rings + 1):
        nodes += _ring(g, 10 * g)
    nodes.append({"id": 1001, "roles": LRN, "rings": [1]})
    nodes.append({"id": 1002, "roles": LRN, "rings": list(range(1, n_rings + 1))})
    d = {
        "name": f"skew-{n_rings}rings",
        "duration": duration,
        "drain": 0.5,
        "network": {"latency": "const:0.1"},
        "rings": {"groups": list(range(1, n_rings + 1))},
        "nodes": nodes,
        "clients": [{"id": 2001, "groups": [1], "mode": "open", "rate": rate, "payload": 200,
                     "start": 0.25}],
        "pacing": {"lambda": lam, "delta_t_ms": delta_t_ms},
        "metrics": {"learners": [1002], "latency": "delivery"},
    }
    if cpu:
        # per-decision merge work is what makes many idle rings visible
        d["cpu"] = {"frame_us": 2.0, "merge_us": 40.0, "apply_us": 5.0}
    return d


def idle_ring(duration: float = 10.0, lam: float = 1000.0, delta_t_ms: float = 5.0) -> dict:
    return {
        "name": "idle-ring",
        "duration": duration,
        "drain": 0.0,
        "rings": {"groups": [1]},
        "nodes": _ring(1, 10) + [{"id": 1001, "roles": LRN, "rings": [1]}],
        "pacing": {"lambda": lam, "delta_t_ms": delta_t_ms},
    }


def large_ring(n_learners: int, hop_ms: float = 1.0, duration: float = 3.0) -> dict:
    """One ring, three acceptors followed by ``n_learners`` learners, one closed-loop client."""
    nodes = _ring(1, 10) + [{"id": 100 + k, "roles": LRN, "rings": [1]} for k in range(n_learners)]
    return {
        "name": f"large-ring-{n_learners}",
        "duration": duration,
        "drain": 0.5,
        "network": {"latency": f"const:{hop_ms}"},
        "rings": {"groups": [1]},
        "nodes": nodes,
        "clients": [{"id": 2001, "groups": [1], "threads": 1, "payload": 200, "start": 0.2}],
        "pacing": {"lambda": 1000, "delta_t_ms": 5},
        "metrics": {"latency": "last-learner"},
    }


def geo(global_ring: bool = True, compensation: bool = False, duration: float = 8.0,
        threads: int = 2, open_rate: Optional[float] = None, payload: int = 200,
        outage: Optional[float] = None, suspicion_ms: float = 200.0) -> dict:
    """Five regions, each with a local ring; optionally a global ring across them.

    The global ring has three acceptors in separate regions and includes every
    region's learner.  Local rings are groups 1..5, the global ring is 6.
    """
    nodes = []
    clients = []
    groups = list(range(1, 6))
    for r, region in enumerate(REGIONS, start=1):
        for k in range(3):
            nodes.append({"id": 10 * r + k, "roles": ACC, "rings": [r], "region": region})
        c = {"id": 2000 + r, "groups": [r], "payload": payload, "region": region, "start": 0.5,
             "resubmit_ms": 3000}
        if open_rate:
            c.update(mode="open", rate=open_rate)
        else:
            c.update(mode="closed", threads=threads)
        clients.append(c)
    if global_ring:
        groups.append(6)
        for k, r in enumerate((1, 3, 4)):
            nodes.append({"id": 60 + k, "roles": ACC, "rings": [6], "region": REGIONS[r - 1]})
    for r, region in enumerate(REGIONS, start=1):
        nodes.append({"id": 100 + r, "roles": LRN, "rings": [r] + ([6] if global_ring else []),
                      "region": region})
    links = [{"from": reg, "to": reg, "latency": f"const:{INTRA_REGION_MS}"} for reg in REGIONS]
    links += [{"from": a, "to": b, "latency": f"const:{ms}"} for (a, b), ms in GEO_DELAY_MS.items()]
    name = "geo-5" + ("" if global_ring else "-local") + ("-comp" if compensation else "")
    d = {
        "name": name,
        "duration": duration,
        "drain": 1.5,
        # the registry is reached over the default link
        "network": {"latency": "const:1", "suspicion_timeout_ms": suspicion_ms},
        "rings": {"groups": groups},
        "nodes": nodes,
        "links": links,
        "clients": clients,
        "pacing": {"lambda": 2000, "delta_t_ms": 10,
                   "compensation": "auto" if compensation else "off"},
        "ring": {"decision_timeout_ms": 2000, "prepare_timeout_ms": 2000, "gap_timeout_ms": 1000},
        "metrics": {"learners": [100 + r for r in range(1, 6)], "latency": "delivery",
                    "warmup": 1.5},
    }
    if outage is not None:
        d["name"] = "dc-outage"
        d["faults"] = [{"at": outage, "kind": "kill-region", "region": REGIONS[0]}]
    return d


def dc_outage(duration: float = 10.0, at: float = 4.0) -> dict:
    """Kill the region hosting the global ring's coordinator mid-run."""
    d = geo(global_ring=True, compensation=True, duration=duration, open_rate=200.0,
            payload=1024, outage=at)
    d["drain"] = 1.0
    return d


def recovery(protocol: str = "new", rate: float = 1330.0, duration: float = 12.0,
             crash_at: float = 4.5, restart_at: float = 7.5) -> dict:
    """KV replicas on one ring under steady load; one replica crashes and recovers.

    The coordinator's CPU is the bottleneck, so work it does to serve a log
    tail comes out of ring throughput.
    """
    nodes = _ring(1, 10) + [{"id": 100 + k, "roles": LRN, "rings": [1]} for k in range(3)]
    return {
        "name": f"recovery-{protocol}",
        "duration": duration,
        "drain": 1.0,
        "network": {"latency": "const:0.1"},
        "rings": {"groups": [1]},
        "nodes": nodes,
        "clients": [{"id": 2001, "groups": [1], "mode": "open", "rate": rate, "payload": 1024,
                     "workload": "kv", "start": 0.0, "resubmit_ms": 5000}],
        "faults": [{"at": crash_at, "kind": "crash", "node": 102},
                   {"at": restart_at, "kind": "restart", "node": 102, "protocol": protocol}],
        "pacing": {"lambda": 4000, "delta_t_ms": 5},
        # about 2000 messages/s of 1 KB saturate the coordinator
        "cpu": {"frame_us": 20.0, "byte_ns": 150.0, "fetch_us": 100.0, "apply_us": 20.0},
        "app": {"kind": "kv"},
        "checkpoint": {"period": 3.0, "poll_ms": 100},
        "metrics": {"learners": [100, 101], "latency": "reply"},
    }


def capacity_probe(threads: int = 64, duration: float = 3.0) -> dict:
    """Closed-loop saturation run of the recovery deployment, no faults."""
    d = recovery("new", duration=duration)
    d["name"] = "recovery-capacity"
    d["faults"] = []
    d["clients"] = [{"id": 2001, "groups": [1], "mode": "closed", "threads": threads,
                     "payload": 1024, "workload": "kv"}]
    return d


# learners and their subscriptions in the safety deployment
SAFETY_LEARNERS = {101: [1, 2, 3], 102: [1, 2, 3], 103: [1, 2], 104: [2, 3], 105: [1, 3]}
# learners that may crash and recover; each has a twin to take checkpoints from
SAFETY_RECOVERABLE = (101, 102)


def safety(seed: int, duration: float = 1.0, drain: float = 3.0) -> dict:
    """Three rings of three acceptors, learners with overlapping subscriptions, random faults.

    At most one acceptor per ring crashes, so every ring keeps a majority.
    Pauses longer than the suspicion timeout cause false suspicions.
    Learners may crash and come back with either recovery procedure.
    """
    rng = random.Random(seed)
    nodes = []
    for g in (1, 2, 3):
        nodes += _ring(g, 10 * g)
    nodes += [{"id": n, "roles": LRN, "rings": rs} for n, rs in SAFETY_LEARNERS.items()]
    faults = []
    for g in (1, 2, 3):
        if rng.random() < 0.5:
            faults.append({"at": round(rng.uniform(0.1, duration), 4), "kind": "crash",
                           "node": 10 * g + rng.randrange(3)})
    for _ in range(rng.randrange(3)):
        victim = rng.choice([n["id"] for n in nodes])
        faults.append({"at": round(rng.uniform(0.1, duration), 4), "kind": "pause",
                       "node": victim, "duration": round(rng.uniform(0.05, 0.4), 4)})
    if rng.random() < 0.4:
        victim = rng.choice(SAFETY_RECOVERABLE)
        t = round(rng.uniform(0.1, duration * 0.8), 4)
        faults.append({"at": t, "kind": "crash", "node": victim})
        faults.append({"at": round(t + rng.uniform(0.1, 0.5), 4), "kind": "restart", "node": victim,
                       "protocol": rng.choice(["new", "old"])})
    drop = round(rng.uniform(0.0, 0.01), 5)
    return {
        "name": f"safety-{seed}",
        "seed": seed,
        "duration": duration,
        "drain": drain,
        "network": {"latency": "uniform:0.05,0.5", "drop": drop, "rto_ms": 5},
        "rings": {"groups": [1, 2, 3]},
        "nodes": nodes,
        "clients": [{"id": 2001, "groups": [1, 2, 3], "mode": "open", "rate": 150, "payload": 32,
                     "resubmit_ms": 300}],
        "faults": faults,
        "pacing": {"lambda": 500, "delta_t_ms": 10},
        "ring": {"decision_timeout_ms": 300, "prepare_timeout_ms": 300, "gap_timeout_ms": 100},
        "checkpoint": {"period": 0.3, "poll_ms": 50},
        "app": {"kind": "log"},
    }


_PATTERNS = [
    (re.compile(r"skew-(\d+)(?:rings?)?$"), lambda m: skew(int(m.group(1)))),
    (re.compile(r"idle-ring$"), lambda m: idle_ring()),
    (re.compile(r"large-ring-(\d+)$"), lambda m: large_ring(int(m.group(1)))),
    (re.compile(r"geo-5$"), lambda m: geo(True, False)),
    (re.compile(r"geo-5-comp$"), lambda m: geo(True, True)),
    (re.compile(r"geo-5-local$"), lambda m: geo(False, False)),
    (re.compile(r"dc-outage$"), lambda m: dc_outage()),
    (re.compile(r"recovery-(new|old)$"), lambda m: recovery(m.group(1))),
    (re.compile(r"safety-(\d+)$"), lambda m: safety(int(m.group(1)))),
]

NAMES = ["skew-{1,2,4,8,16,32}rings", "idle-ring", "large-ring-N", "geo-5", "geo-5-comp",
         "geo-5-local", "dc-outage", "recovery-new", "recovery-old", "safety-SEED"]


def generate(name: str) -> Optional[dict]:
    for pat, fn in _PATTERNS:
        m = pat.match(name)
        if m:
            return fn(m)
    return None
