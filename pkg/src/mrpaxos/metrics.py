"""Throughput timelines, latency histograms and percentiles."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import NoSamples

# latency samples are seconds; buckets are whole milliseconds
BUCKET_MS = 1


def bucket_of(sample_s: float) -> int:
    """Ceiling to the millisecond.  The tiny tolerance keeps exact values like 2 ms in bucket 2."""
    ms = sample_s * 1000.0
    return max(0, math.ceil(ms - 1e-9))


def latency_histogram(samples: Iterable[float]) -> dict[int, int]:
    hist: dict[int, int] = defaultdict(int)
    for s in samples:
        hist[bucket_of(s)] += 1
    return dict(sorted(hist.items()))


def emit_latency_cdf(samples: Sequence[float]) -> list[tuple[int, float]]:
    """Rows of (bucket_ms, cumulative fraction), one per non-empty bucket."""
    samples = list(samples)
    if not samples:
        raise NoSamples("latency CDF needs at least one sample")
    hist = latency_histogram(samples)
    n = len(samples)
    rows = []
    acc = 0
    for b, c in hist.items():
        acc += c
        rows.append((b, acc / n))
    # guard against float drift on the last row
    rows[-1] = (rows[-1][0], 1.0)
    return rows


def percentiles(samples: Sequence[float], qs=(50, 90, 99)) -> dict[int, float]:
    if len(samples) == 0:
        raise NoSamples("no latency samples")
    arr = np.asarray(samples, dtype=float)
    return {q: float(np.percentile(arr, q)) for q in qs}


@dataclass
class Timeline:
    """Per-window delivered message and bit counts for each ring."""

    window: float = 1.0
    msgs: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))
    bits: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))

    def add(self, t: float, group: int, nbytes: int) -> None:
        w = int(t // self.window)
        self.msgs[w][group] += 1
        self.bits[w][group] += 8 * nbytes

    def rows(self, until: Optional[float] = None):
        """(t_s, ring, msgs, bits) with ring ``all`` for the aggregate, every window filled."""
        if not self.msgs:
            return []
        last = max(self.msgs) if until is None else int(math.ceil(until / self.window)) - 1
        groups = sorted({g for w in self.msgs.values() for g in w})
        out = []
        for w in range(0, last + 1):
            tot_m = tot_b = 0
            for g in groups:
                m = self.msgs.get(w, {}).get(g, 0)
                b = self.bits.get(w, {}).get(g, 0)
                tot_m += m
                tot_b += b
                out.append((w * self.window, str(g), m, b))
            out.append((w * self.window, "all", tot_m, tot_b))
        return out

    def rate(self, t0: float, t1: float, group=None) -> float:
        """Mean messages per second over whole windows inside [t0, t1)."""
        w0 = int(math.ceil(t0 / self.window - 1e-9))
        w1 = int(t1 // self.window)
        if w1 <= w0:
            return 0.0
        total = 0
        for w in range(w0, w1):
            per = self.msgs.get(w, {})
            total += per.get(group, 0) if group is not None else sum(per.values())
        return total / ((w1 - w0) * self.window)

    def summary(self, t0: float, t1: float, group=None) -> tuple[float, float]:
        """(mean, peak) messages per second over the windows in [t0, t1)."""
        w0 = int(math.ceil(t0 / self.window - 1e-9))
        w1 = int(t1 // self.window)
        vals = []
        for w in range(w0, w1):
            per = self.msgs.get(w, {})
            vals.append((per.get(group, 0) if group is not None else sum(per.values())) / self.window)
        if not vals:
            return 0.0, 0.0
        return sum(vals) / len(vals), max(vals)


def timeline_for(deliveries, window: float = 1.0) -> Timeline:
    tl = Timeline(window)
    for rec in deliveries:
        t, g, _, _, mid, nbytes = rec
        if mid is not None:
            tl.add(t, g, nbytes)
    return tl


def delivery_latencies(trace, learners=None, since: float = 0.0) -> list[float]:
    """Submit-to-delivery latency of each message submitted at or after ``since``."""
    sub = trace.submitted
    out = []
    for n in sorted(trace.deliveries if learners is None else learners):
        for t, _, _, _, mid, _ in trace.deliveries.get(n, ()):
            s = sub.get(mid)
            if s is not None and s[0] >= since:
                out.append(t - s[0])
    return out


def reply_latencies(trace, since: float = 0.0) -> list[float]:
    sub = trace.submitted
    return [t - sub[mid][0] for mid, t in trace.replies.items() if mid in sub and sub[mid][0] >= since]


def last_learner_latencies(trace, learners, since: float = 0.0) -> list[float]:
    """Per message, the time until the last of ``learners`` delivered it."""
    last: dict = {}
    seen: dict = {}
    for n in learners:
        for t, _, _, _, mid, _ in trace.deliveries.get(n, ()):
            last[mid] = max(last.get(mid, t), t)
            seen[mid] = seen.get(mid, 0) + 1
    sub = trace.submitted
    return [t - sub[mid][0] for mid, t in last.items()
            if seen[mid] == len(learners) and mid in sub and sub[mid][0] >= since]


def cdf_steps(samples: Sequence[float], min_mass: float = 0.05, gap_ms: int = 10) -> list[tuple[int, int, float]]:
    """Find the steep parts ("steps") of a latency CDF.

    A step is a run of millisecond buckets, each holding at least
    ``min_mass`` of the samples, where neighbouring heavy buckets are less
    than ``gap_ms`` apart.  Returns ``(first_ms, last_ms, mass)`` per step.
    """
    if len(samples) == 0:
        raise NoSamples("no latency samples")
    hist = latency_histogram(samples)
    n = len(samples)
    heavy = [(b, c / n) for b, c in hist.items() if c / n >= min_mass]
    steps: list[tuple[int, int, float]] = []
    for b, m in heavy:
        if steps and b - steps[-1][1] < gap_ms:
            lo, _, mass = steps[-1]
            steps[-1] = (lo, b, mass + m)
        else:
            steps.append((b, b, m))
    return steps
