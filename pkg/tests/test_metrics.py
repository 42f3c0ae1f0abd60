from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpaxos.core import MessageId
from mrpaxos.errors import NoSamples
from mrpaxos.metrics import (
    Timeline,
    bucket_of,
    cdf_steps,
    emit_latency_cdf,
    last_learner_latencies,
    latency_histogram,
    percentiles,
)
from mrpaxos.trace import Trace


def test_buckets_round_up_to_the_millisecond():
    assert [bucket_of(x) for x in (0.0, 0.0004, 0.001, 0.002, 0.0021)] == [0, 1, 1, 2, 3]
    assert latency_histogram([0.0015, 0.0019, 0.003]) == {2: 2, 3: 1}


@given(st.lists(st.floats(0, 2.0), min_size=1, max_size=300))
def test_cdf_is_monotone_and_ends_at_one(samples):
    rows = emit_latency_cdf(samples)
    buckets = [b for b, _ in rows]
    fracs = [f for _, f in rows]
    assert buckets == sorted(set(buckets))
    assert fracs == sorted(fracs)
    assert fracs[-1] == 1.0


def test_empty_inputs_raise():
    for fn in (emit_latency_cdf, percentiles, cdf_steps):
        with pytest.raises(NoSamples):
            fn([])


def test_percentiles():
    p = percentiles([i / 1000 for i in range(1, 101)])
    assert p[50] == pytest.approx(0.0505)
    assert p[99] == pytest.approx(0.09901)


def test_steps_find_separated_modes():
    two = [0.010] * 50 + [0.011] * 10 + [0.080] * 40
    assert cdf_steps(two) == [(10, 11, pytest.approx(0.6)), (80, 80, pytest.approx(0.4))]
    spread = [i / 10000 for i in range(1000)]
    # no single millisecond holds 5% of a flat distribution
    assert cdf_steps(spread) == []


def test_timeline_windows_and_rates():
    tl = Timeline(0.5)
    for t in (0.1, 0.2, 0.6, 1.4):
        tl.add(t, 1, 100)
    tl.add(0.3, 2, 10)
    rows = tl.rows(until=1.5)
    assert rows[:3] == [(0.0, "1", 2, 1600), (0.0, "2", 1, 80), (0.0, "all", 3, 1680)]
    assert len(rows) == 9
    assert tl.rate(0.0, 1.5, 1) == pytest.approx(4 / 1.5)
    assert tl.rate(0.2, 1.0) == pytest.approx(1 / 0.5)
    assert tl.summary(0.0, 1.5, 1) == (pytest.approx(4 / 1.5), 4.0)
    assert Timeline().rows() == []


def test_last_learner_latency_needs_every_learner():
    clock = [0.0]
    tr = Trace(lambda: clock[0])
    a, b = MessageId(1, 0), MessageId(1, 1)
    tr.submit(a, 1)
    tr.submit(b, 1)
    tr.deliver(10, 0.004, 1, 0, 0, a)
    tr.deliver(11, 0.009, 1, 0, 0, a)
    tr.deliver(10, 0.005, 1, 1, 1, b)
    assert last_learner_latencies(tr, [10, 11]) == [pytest.approx(0.009)]


def test_uniform_samples_give_a_linear_cdf():
    import random

    rng = random.Random(11)
    samples = [rng.uniform(0, 0.010) for _ in range(20000)]
    for bucket, frac in emit_latency_cdf(samples):
        assert frac == pytest.approx(bucket / 10, abs=0.02)
