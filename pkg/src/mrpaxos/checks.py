"""Trace oracles for atomic multicast runs.

Each check takes a finished :class:`~mrpaxos.cluster.SimCluster` and returns
a list of human readable violations; an empty list means the property held.
"""
from __future__ import annotations

import graphlib
from collections import defaultdict

from .core import unwrap


def _decided_mids(cluster) -> dict:
    """(group, instance) -> list of message ids in payload order, app values only."""
    out = {}
    for (g, i), v in cluster.trace.decisions.items():
        if not v.is_skip:
            out[(g, i)] = [unwrap(p)[0] for p in v.payloads]
    return out


def _segments(cluster, learner: int) -> list[list]:
    """A learner's deliveries split into before and after its last restart."""
    recs = cluster.trace.deliveries.get(learner, [])
    t0 = cluster.trace.restarted_at.get(learner)
    if t0 is None:
        return [recs]
    return [[r for r in recs if r[0] < t0], [r for r in recs if r[0] >= t0]]


def _post_restart(cluster, learner: int) -> list:
    recs = cluster.trace.deliveries.get(learner, [])
    t0 = cluster.trace.restarted_at.get(learner)
    if t0 is None:
        return recs
    return [r for r in recs if r[0] >= t0]


def single_value(cluster) -> list[str]:
    return [f"conflicting decisions {c}" for c in cluster.trace.conflicts]


def integrity(cluster) -> list[str]:
    """Each learner delivers a message at most once per incarnation, and only if it was multicast and decided there."""
    out = []
    submitted = cluster.trace.submitted
    decided = _decided_mids(cluster)
    for n, recs in sorted(cluster.trace.deliveries.items()):
        for part in _segments(cluster, n):
            seen = set()
            for t, g, inst, _, mid, _ in part:
                if mid in seen:
                    out.append(f"learner {n} delivered {mid} twice")
                seen.add(mid)
        for t, g, inst, _, mid, _ in recs:
            if mid not in submitted:
                out.append(f"learner {n} delivered {mid}, never multicast")
            elif mid not in decided.get((g, inst), ()):
                out.append(f"learner {n} delivered {mid} from ring {g} instance {inst}, not decided there")
    return out


def agreement(cluster) -> list[str]:
    """Every live learner delivered exactly the decided messages of its rings, up to its frontier.

    The frontier must also cover every decided application message, so after
    a drain all live learners have delivered the same per-ring streams.
    Recovered learners are checked from the point where they resumed.
    """
    out = []
    decided = _decided_mids(cluster)
    last_app = defaultdict(lambda: -1)
    for (g, i) in decided:
        last_app[g] = max(last_app[g], i)
    for n, p in sorted(cluster.nodes.items()):
        if not p.alive or p.cursor is None:
            continue
        if n in cluster.trace.recovered and n not in cluster.trace.resumed:
            out.append(f"learner {n} restarted but never went live")
            continue
        resume = cluster.trace.resumed.get(n, {})
        got = defaultdict(list)
        for t, g, inst, _, mid, _ in _post_restart(cluster, n):
            got[g].append((inst, mid))
        for g in p.rings:
            frontier = p.cursor.next_instance[g]
            if frontier <= last_app[g]:
                out.append(f"learner {n} ring {g} stopped at instance {frontier}, "
                           f"decided messages up to {last_app[g]}")
            start_inst, start_off = resume.get(g, (0, 0))
            want = []
            for (gg, i), mids in sorted(decided.items()):
                if gg != g or i < start_inst or i >= frontier:
                    continue
                want.extend((i, m) for m in (mids[start_off:] if i == start_inst else mids))
            if got[g] != want:
                missing = len(set(want) - set(got[g]))
                extra = len(set(got[g]) - set(want))
                out.append(f"learner {n} ring {g}: delivered stream differs "
                           f"({missing} missing, {extra} unexpected, {len(want)} expected)")
    return out


def validity(cluster) -> list[str]:
    """Messages from clients that never crashed were decided."""
    out = []
    decided = set()
    for mids in _decided_mids(cluster).values():
        decided.update(mids)
    crashed = cluster.trace.crashed
    for mid in cluster.trace.submitted:
        if mid.client not in crashed and mid not in decided:
            out.append(f"message {mid} was multicast but never decided")
    return out


def order(cluster) -> list[str]:
    """The union of all learners' delivery orders is acyclic.

    Edges between consecutive deliveries are enough, since a cycle in the
    transitive closure implies one among these edges.
    """
    graph: dict = defaultdict(set)
    for n in cluster.trace.deliveries:
        # a recovered learner replays from its checkpoint, so each life is its own sequence
        for part in _segments(cluster, n):
            prev = None
            for rec in part:
                mid = rec[4]
                if prev is not None and prev != mid:
                    graph[mid].add(prev)
                prev = mid
    try:
        tuple(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        return [f"delivery order has a cycle through {exc.args[1][:6]}"]
    return []


def ring_integrity(cluster) -> list[str]:
    return [f"t={t:.4f} ring {g} frame kind {k} {src}->{dst} is not a successor hop"
            for t, src, dst, k, g in cluster.net.ring_violations[:20]]


def view_agreement(cluster) -> list[str]:
    epoch = cluster.registry.epoch
    out = []
    for n, p in sorted(cluster.nodes.items()):
        if p.alive and n in cluster.registry.registered and (p.view is None or p.view.epoch != epoch):
            have = None if p.view is None else p.view.epoch
            out.append(f"node {n} holds epoch {have}, registry is at {epoch}")
    return out


def state_agreement(cluster) -> list[str]:
    """Live replicas with the same subscription end in the same application state."""
    out = []
    by_subs = defaultdict(dict)
    for n, h in cluster.trace.state_hashes.items():
        by_subs[cluster.nodes[n].rings][n] = h
    for rings, hashes in by_subs.items():
        if len(set(hashes.values())) > 1:
            out.append(f"replicas of rings {rings} diverged: {hashes}")
    return out


ALL = {
    "agreement": agreement,
    "validity": validity,
    "integrity": integrity,
    "order": order,
    "single-value": single_value,
    "ring-integrity": ring_integrity,
    "view-agreement": view_agreement,
    "state": state_agreement,
}


def check_all(cluster, only=None) -> dict[str, list[str]]:
    names = only or ALL
    return {name: ALL[name](cluster) for name in names}
