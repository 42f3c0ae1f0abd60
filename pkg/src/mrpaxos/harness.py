"""Run scenarios in simulation and write their metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

from . import checks
from .cluster import SimCluster
from .errors import NoSamples
from .metrics import (Timeline, delivery_latencies, emit_latency_cdf, last_learner_latencies,
                      percentiles, reply_latencies)
from .scenario import Scenario, load

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    cluster: SimCluster
    timeline: Timeline
    latencies: list
    percentiles: dict = field(default_factory=dict)
    delivered: dict = field(default_factory=dict)
    trace_hash: str = ""

    @property
    def trace(self):
        return self.cluster.trace

    def check(self, only=None) -> dict:
        return checks.check_all(self.cluster, only)


def measure(scenario: Scenario, cluster: SimCluster) -> tuple[Timeline, list]:
    trace = cluster.trace
    learners = scenario.measure_learners()
    warmup = float(scenario.metrics.get("warmup", 0.0))
    tl = Timeline(float(scenario.metrics.get("window", 1.0)))
    # throughput at the first measured learner that was never restarted
    steady = [n for n in learners if n not in trace.recovered] or learners
    if steady:
        for t, g, _, _, mid, nbytes in trace.deliveries.get(steady[0], ()):
            if mid is not None:
                tl.add(t, g, nbytes)
    source = scenario.metrics.get("latency", "reply")
    if source == "delivery":
        lat = delivery_latencies(trace, steady, warmup)
    elif source == "last-learner":
        lat = last_learner_latencies(trace, steady, warmup)
    else:
        lat = reply_latencies(trace, warmup)
    return tl, lat


def ring_circulation(cluster: SimCluster, group: int, view=None) -> float:
    """Mean time for a frame to travel once around ``group``'s ring, ignoring CPU."""
    view = view or cluster.registry.view()
    order = view.nodes(group)
    return sum(cluster.net.link(a, b).latency.mean for a, b in zip(order, order[1:] + order[:1]))


def run(scenario, seed: Optional[int] = None, *, overrides: Optional[dict] = None) -> RunResult:
    """Build and run ``scenario`` (a :class:`Scenario`, a dict, a name or a path)."""
    if not isinstance(scenario, Scenario):
        scenario = load(scenario, overrides)
    seed = scenario.seed if seed is None else seed
    cluster = scenario.build(seed)
    cluster.run(scenario.horizon, scenario.max_events)
    cluster.finish()
    tl, lat = measure(scenario, cluster)
    try:
        pct = percentiles(lat) if lat else {}
    except NoSamples:
        pct = {}
    delivered = {n: sum(1 for r in recs if r[4] is not None)
                 for n, recs in sorted(cluster.trace.deliveries.items())}
    return RunResult(scenario, seed, cluster, tl, lat, pct, delivered, cluster.trace.digest())


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_outputs(result: RunResult, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    sc = result.scenario
    rows = result.timeline.rows(until=sc.horizon)
    _write_csv(os.path.join(out_dir, "throughput.csv"), ["t_s", "ring", "msgs", "bits"],
               [(_fmt(t), g, m, b) for t, g, m, b in rows])
    cdf = emit_latency_cdf(result.latencies) if result.latencies else []
    _write_csv(os.path.join(out_dir, "latency_cdf.csv"), ["bucket_ms", "cum_fraction"],
               [(b, _fmt(f)) for b, f in cdf])
    _write_csv(os.path.join(out_dir, "events.csv"), ["t_s", "kind", "detail"],
               [(_fmt(t), k, d) for t, k, d in result.trace.events])
    raw = json.dumps(sc.raw, sort_keys=True, default=str)
    manifest = {
        "scenario": sc.name,
        "seed": result.seed,
        "config_sha256": hashlib.sha256(raw.encode()).hexdigest(),
        "config": sc.raw,
        "trace_hash": result.trace_hash,
        "delivered": {str(n): c for n, c in result.delivered.items()},
        "decided_slots": _slots(result.trace),
        "latency_samples": len(result.latencies),
        "percentiles_ms": {f"p{q}": round(v * 1000.0, 6) for q, v in result.percentiles.items()},
        "simulated_s": sc.horizon,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def _slots(trace) -> dict:
    out: dict = {}
    for (g, _), v in trace.decisions.items():
        out[str(g)] = out.get(str(g), 0) + v.slots
    return dict(sorted(out.items()))


def run_scenario(path, seed: Optional[int] = None, out_dir: str = "out") -> dict:
    """Run a scenario file or bundled name and write CSVs plus ``manifest.json``."""
    result = run(path, seed)
    return write_outputs(result, out_dir)


def report(out_dir: str) -> str:
    """Percentile and throughput summary of a finished run directory."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    lines = [f"scenario {manifest['scenario']} seed {manifest['seed']}",
             f"trace {manifest['trace_hash'][:16]}"]
    pct = manifest.get("percentiles_ms", {})
    if pct:
        lines.append("latency " + "  ".join(f"{k}={v:.3f}ms" for k, v in sorted(pct.items())))
    per_ring: dict = {}
    with open(os.path.join(out_dir, "throughput.csv")) as fh:
        for row in csv.DictReader(fh):
            per_ring.setdefault(row["ring"], []).append(int(row["msgs"]))
    for ring, vals in sorted(per_ring.items()):
        if vals:
            lines.append(f"ring {ring:>4}: mean {sum(vals) / len(vals):10.1f} msg/s  peak {max(vals):8d} msg/s")
    slots = manifest.get("decided_slots", {})
    if slots:
        lines.append("decided slots " + " ".join(f"{g}:{c}" for g, c in slots.items()))
    lines.append("delivered " + " ".join(f"{n}:{c}" for n, c in manifest["delivered"].items()))
    return "\n".join(lines)
