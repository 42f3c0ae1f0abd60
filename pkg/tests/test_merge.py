from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpaxos.core import Value
from mrpaxos.errors import OutOfOrderInstance
from mrpaxos.merge import MergeCursor, SlotMap, consumed_at, global_slot, ring_position
from reference import reference_merge, serialize


def run_cursor(rings_values, m, groups=None):
    groups = groups or list(range(1, len(rings_values) + 1))
    cur = MergeCursor(groups, m)
    for g, values in zip(groups, rings_values):
        for inst, (kind, content) in enumerate(values):
            v = Value.app(content) if kind == "app" else Value.skip(content)
            cur.enqueue_decision(g, inst, v)
    out = cur.try_deliver()
    rows = [(d.global_slot, groups.index(d.group), d.ring_instance, d.payload) for d in out]
    return cur, rows


def test_example_interleaving_with_late_message():
    cur = MergeCursor([1, 2], m=1)
    cur.enqueue_decision(1, 0, Value.app([b"a"]))
    cur.enqueue_decision(1, 1, Value.app([b"b"]))
    cur.enqueue_decision(2, 0, Value.app([b"c"]))
    cur.enqueue_decision(2, 1, Value.skip(1))
    cur.enqueue_decision(2, 2, Value.app([b"d"]))
    first = [d.payload for d in cur.try_deliver()]
    assert first == [b"a", b"c", b"b"]
    assert cur.blocked_on() == 1
    cur.enqueue_decision(1, 2, Value.app([b"e"]))
    rest = cur.try_deliver()
    assert [d.payload for d in rest] == [b"e", b"d"]
    # the skip took slot 3
    assert [d.global_slot for d in rest] == [4, 5]


def test_single_ring_is_fifo_passthrough():
    cur = MergeCursor([7], m=1)
    for i, p in enumerate([b"x", b"y", b"z"]):
        cur.enqueue_decision(7, i, Value.app([p]))
    out = cur.try_deliver()
    assert [d.payload for d in out] == [b"x", b"y", b"z"]
    assert [d.global_slot for d in out] == [0, 1, 2]


def test_second_ring_first_message_has_slot_one():
    cur = MergeCursor([1, 2], m=1)
    cur.enqueue_decision(2, 0, Value.app([b"q"]))
    assert cur.try_deliver() == []
    cur.enqueue_decision(1, 0, Value.skip(1))
    (d,) = cur.try_deliver()
    assert d.global_slot == 1


def test_skip_600_credits_600_slots():
    cur = MergeCursor([1, 2], m=1)
    cur.enqueue_decision(1, 0, Value.skip(600))
    assert cur.pending_slots(1) == 600
    assert cur.try_deliver() == []
    cur.enqueue_decision(2, 0, Value.skip(600))
    cur.try_deliver()
    assert cur.consumed_slots == {1: 600, 2: 600}
    assert cur.next_global_slot == 1200


def test_app_batch_is_three_slots():
    cur = MergeCursor([1], m=1)
    cur.enqueue_decision(1, 0, Value.app([b"1", b"2", b"3"]))
    out = cur.try_deliver()
    assert len(out) == 3
    assert all(d.ring_instance == 0 for d in out)
    assert cur.consumed_slots[1] == 3


def test_out_of_order_instance_rejected():
    cur = MergeCursor([1], m=1)
    cur.enqueue_decision(1, 0, Value.skip(1))
    with pytest.raises(OutOfOrderInstance):
        cur.enqueue_decision(1, 2, Value.skip(1))


@pytest.mark.parametrize(
    "args,expected",
    [((0, 0, 2, 1), 0), ((1, 0, 2, 1), 1), ((2, 5, 3, 2), 17)],
)
def test_global_slot_examples(args, expected):
    assert global_slot(*args) == expected


def test_slot_map_is_a_bijection():
    for k in range(1, 6):
        for m in range(1, 5):
            sm = SlotMap(k, m)
            seen = set()
            for idx in range(k):
                for rs in range(40):
                    g = sm.global_slot(idx, rs)
                    assert sm.ring_position(g) == (idx, rs)
                    seen.add(g)
            assert len(seen) == k * 40


def test_consumed_at_matches_brute_force():
    for k in range(1, 5):
        for m in range(1, 4):
            counts = [0] * k
            for g in range(60):
                assert consumed_at(g, k, m) == counts
                idx, _ = ring_position(g, k, m)
                counts[idx] += 1


def test_skips_spanning_turns_with_m_two():
    # a skip of 3 with M=2 is consumed 2 then 1 across turns
    _, rows = run_cursor([[("skip", 3), ("app", [b"a"])], [("app", [b"b", b"c", b"d"])]], 2)
    ref, _, _ = reference_merge([[("skip", 3), ("app", [b"a"])], [("app", [b"b", b"c", b"d"])]], 2)
    assert rows == ref


values_st = st.lists(
    st.one_of(
        st.tuples(st.just("app"), st.lists(st.binary(min_size=1, max_size=3), min_size=1, max_size=3)),
        st.tuples(st.just("skip"), st.integers(1, 6)),
    ),
    max_size=8,
)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.data())
def test_matches_reference_merge(k, m, data):
    rings = [data.draw(values_st) for _ in range(k)]
    cur, rows = run_cursor(rings, m)
    ref, used, g = reference_merge(rings, m)
    assert serialize(rows) == serialize(ref)
    assert [cur.consumed_slots[i + 1] for i in range(k)] == used
    assert cur.next_global_slot == g == sum(used)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.data())
def test_incremental_arrival_is_deterministic(k, m, data):
    """Arrival interleaving never changes the merged stream."""
    rings = [data.draw(values_st) for _ in range(k)]
    _, batch_rows = run_cursor(rings, m)
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = random.Random(seed)
    cur = MergeCursor(range(1, k + 1), m)
    cursors = [0] * k
    rows = []
    while any(cursors[i] < len(rings[i]) for i in range(k)):
        i = rng.choice([i for i in range(k) if cursors[i] < len(rings[i])])
        kind, content = rings[i][cursors[i]]
        v = Value.app(content) if kind == "app" else Value.skip(content)
        cur.enqueue_decision(i + 1, cursors[i], v)
        cursors[i] += 1
        for d in cur.try_deliver():
            rows.append((d.global_slot, d.group - 1, d.ring_instance, d.payload))
        # blocking rule: no progress only when the current turn's ring is empty
        assert cur.blocked_on() is not None
    assert rows == batch_rows
    for g in cur.rings:
        assert cur.enqueued_slots[g] == cur.consumed_slots[g] + cur.pending_slots(g)


def test_resume_continues_identically():
    rings = [[("app", [b"a", b"b"]), ("skip", 5), ("app", [b"c"])], [("skip", 4), ("app", [b"d", b"e"])]]
    full, rows = run_cursor(rings, 1)
    # stop part way, snapshot positions, resume with the remainder
    cur = MergeCursor([1, 2], 1)
    for g, values in zip([1, 2], rings):
        for inst, (kind, content) in enumerate(values):
            v = Value.app(content) if kind == "app" else Value.skip(content)
            cur.enqueue_decision(g, inst, v)
    first = cur.try_deliver(limit=2)
    consumed, positions = dict(cur.consumed_slots), cur.positions()
    resumed = MergeCursor.resume([1, 2], 1, consumed, positions)
    for g, values in zip([1, 2], rings):
        inst0 = positions[g][0]
        for inst in range(inst0, len(values)):
            kind, content = values[inst]
            v = Value.app(content) if kind == "app" else Value.skip(content)
            resumed.enqueue_decision(g, inst, v)
    rest = resumed.try_deliver()
    got = [(d.global_slot, d.group - 1, d.ring_instance, d.payload) for d in first + rest]
    assert got == rows
