from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpaxos.errors import NoSamples, NotCoordinator
from mrpaxos.pacing import (
    ClockSource,
    DelayEstimator,
    Pacer,
    SkipLedger,
    compute_skips,
    compute_skips_compensated,
    estimate_avg_delay,
    parse_compensation,
)
from reference import reference_ewma


def test_direct_evaluation():
    ledger = SkipLedger(lam=1000, delta_t=0.005, ordered_slots=150, skipped_slots=250)
    assert compute_skips(ledger, 1.0) == 600


def test_identity_case():
    assert compute_skips(SkipLedger(lam=1000, delta_t=0.005), 0.0) == 0


def test_clamped_when_ring_is_ahead():
    ledger = SkipLedger(lam=1000, delta_t=0.005, ordered_slots=5000)
    assert compute_skips(ledger, 1.0) == 0


def test_compensation_readings():
    ledger = SkipLedger(lam=1000, delta_t=0.005, ordered_slots=400)
    ledger.compensation = 0.05
    assert compute_skips_compensated(ledger, 1.0) == 650
    ledger.compensation = 0.0
    assert compute_skips_compensated(ledger, 1.0) == compute_skips(ledger, 1.0) == 600
    ledger.compensation = -0.05
    assert compute_skips_compensated(ledger, 1.0) == 550


def test_steady_state_with_two_messages_per_tick():
    # replay 100 ticks; the oracle is lambda*dt - apps_per_tick = 3 per tick
    ledger = SkipLedger(lam=1000, delta_t=0.005)
    skips = []
    for k in range(1, 101):
        ledger.record_decided(app_slots=2, was_pending=False)
        n = compute_skips(ledger, k * 0.005)
        ledger.record_decided(skip_slots=n, was_pending=False)
        skips.append(n)
        assert ledger.ordered_slots + ledger.skipped_slots == math.floor(1000 * k * 0.005 + 1e-9)
    assert set(skips) == {3}


def test_idle_ring_tick_proposes_five():
    ledger = SkipLedger(lam=1000, delta_t=0.005)
    pacer = Pacer(ledger)
    proposed = []
    for k in range(1, 21):
        pacer.on_tick(k * 0.005, True, proposed.append)
        ledger.record_decided(skip_slots=proposed[-1])
    assert proposed == [5] * 20
    assert ledger.pending_slots == 0


def test_pending_slots_prevent_double_proposal():
    ledger = SkipLedger(lam=1000, delta_t=0.005)
    pacer = Pacer(ledger)
    out = []
    pacer.on_tick(0.005, True, out.append)
    # the first skip is still circulating at the next tick
    pacer.on_tick(0.010, True, out.append)
    assert out == [5, 5]


def test_saturated_ring_proposes_nothing():
    ledger = SkipLedger(lam=1000, delta_t=0.005, ordered_slots=10)
    out = []
    assert Pacer(ledger).on_tick(0.005, True, out.append) == 0
    assert out == []


def test_tick_at_non_coordinator():
    with pytest.raises(NotCoordinator):
        Pacer(SkipLedger(lam=1000, delta_t=0.005)).on_tick(0.005, False, print)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        SkipLedger(lam=0, delta_t=0.005)
    with pytest.raises(ValueError):
        SkipLedger(lam=10, delta_t=0)
    with pytest.raises(ValueError):
        compute_skips(SkipLedger(lam=10, delta_t=1, t_ref=5), 4)


@given(
    st.floats(1, 1e5),
    st.floats(0, 100),
    st.integers(0, 10**6),
    st.integers(0, 10**6),
    st.floats(-1, 1),
)
def test_skips_never_negative(lam, t, ordered, skipped, comp):
    ledger = SkipLedger(lam=lam, delta_t=0.01, ordered_slots=ordered, skipped_slots=skipped)
    ledger.compensation = comp
    assert compute_skips(ledger, t) >= 0
    assert compute_skips_compensated(ledger, t) >= 0


def test_ewma_constant_samples_converge():
    assert estimate_avg_delay([0.080] * 300) == pytest.approx(0.080, abs=1e-9)


def test_ewma_three_samples_against_reference():
    samples = [0.010, 0.010, 0.100]
    assert estimate_avg_delay(samples) == pytest.approx(reference_ewma(samples), rel=1e-12)
    assert estimate_avg_delay(samples) == pytest.approx(0.01171, abs=1e-9)


def test_no_samples():
    with pytest.raises(NoSamples):
        estimate_avg_delay([])
    est = DelayEstimator()
    assert est.estimate == 0.0


def test_static_overrides_measurements():
    est = DelayEstimator(static=0.05)
    for _ in range(10):
        est.add(0.2)
    assert est.estimate == 0.05


def test_compensation_modes_drive_pacer():
    for spec, sign in [("auto", 1), ("neg-auto", -1), ("off", 0)]:
        mode, fixed = parse_compensation(spec)
        ledger = SkipLedger(lam=1000, delta_t=0.005, ordered_slots=400)
        pacer = Pacer(ledger, mode, fixed, DelayEstimator(static=0.05))
        assert pacer.skips_due(1.0) == 600 + sign * 50
    mode, fixed = parse_compensation("fixed:20")
    assert (mode, fixed) == ("fixed", 0.02)
    with pytest.raises(ValueError):
        parse_compensation("sideways")


def test_clock_source_skew_and_monotonic():
    times = iter([1.0, 2.0, 1.5, 3.0])
    clock = ClockSource(lambda: next(times), skew=0.25)
    assert [clock.now() for _ in range(4)] == [1.25, 2.25, 2.25, 3.25]


def test_seed_is_provisional_until_a_sample_arrives():
    est = DelayEstimator()
    est.seed(0.03)
    assert est.estimate == 0.03
    est.add(0.01, source=5)
    assert est.estimate == pytest.approx(0.001)
    # a seed never overrides real measurements
    est.seed(0.5)
    assert est.estimate == pytest.approx(0.001)


def test_take_over_keeps_the_previous_lead():
    # a former coordinator ran 40 ms ahead: 1040 slots consumed at t = 1.0
    ledger = SkipLedger(lam=1000, delta_t=0.005, skipped_slots=1040)
    pacer = Pacer(ledger, "auto")
    assert pacer.skips_due(1.0) == 0
    pacer.take_over(1.0)
    assert pacer.estimator.estimate == pytest.approx(0.04)
    # so the next tick keeps the ring moving instead of pausing 40 ms
    assert pacer.skips_due(1.005) == 5


def test_take_over_only_in_auto_mode():
    ledger = SkipLedger(lam=1000, delta_t=0.005, skipped_slots=1040)
    for pacer in (Pacer(ledger, "off"), Pacer(ledger, "auto", estimator=DelayEstimator(static=0.0))):
        pacer.take_over(1.0)
        assert pacer.estimator.seeded is None
    behind = Pacer(SkipLedger(lam=1000, delta_t=0.005), "auto")
    behind.take_over(1.0)
    assert behind.estimator.estimate == 0.0
