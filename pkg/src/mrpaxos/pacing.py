"""Skip pacing: keep every ring's slot count close to ``lambda * elapsed``.

Each coordinator periodically compares the slots its ring has consumed with
the slots a ring running at the virtual rate ``lam`` would have consumed since
the shared reference time ``t_ref``, and proposes one skip value covering the
difference.  Compensation shifts the target by a signed amount (by default the
estimated coordinator-to-learner delay) so that skips arrive ahead of need.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .errors import NoSamples, NotCoordinator

log = logging.getLogger(__name__)

EWMA_WEIGHT = 0.1
# absorbs float error in lam * t for t built from tick multiples
_EPS = 1e-9


@dataclass
class SkipLedger:
    lam: float
    delta_t: float
    t_ref: float = 0.0
    skipped_slots: int = 0
    ordered_slots: int = 0
    # slots proposed but not yet decided; counted as consumed so that a
    # circulation longer than delta_t does not re-propose the same deficit
    pending_slots: int = 0
    avg_delay: float = 0.0
    compensation: float = 0.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be > 0")

    @property
    def consumed(self) -> int:
        return self.ordered_slots + self.skipped_slots + self.pending_slots

    def target(self, t_now: float, shift: float = 0.0) -> int:
        return math.floor(self.lam * (t_now - self.t_ref + shift) + _EPS)

    def record_decided(self, app_slots: int = 0, skip_slots: int = 0, was_pending: bool = True):
        if app_slots < 0 or skip_slots < 0:
            raise ValueError("slot counts only grow")
        self.ordered_slots += app_slots
        self.skipped_slots += skip_slots
        if was_pending:
            self.pending_slots = max(0, self.pending_slots - app_slots - skip_slots)


def compute_skips(ledger: SkipLedger, t_now: float) -> int:
    """Slots to skip now so the ring keeps pace with ``lam``."""
    if t_now < ledger.t_ref:
        raise ValueError("t_now precedes t_ref")
    return max(0, ledger.target(t_now) - ledger.consumed)


def compute_skips_compensated(ledger: SkipLedger, t_now: float) -> int:
    """As :func:`compute_skips` with the target shifted by ``ledger.compensation``."""
    if t_now < ledger.t_ref:
        raise ValueError("t_now precedes t_ref")
    return max(0, ledger.target(t_now, ledger.compensation) - ledger.consumed)


def estimate_avg_delay(samples: Iterable[float], weight: float = EWMA_WEIGHT,
                       initial: float = 0.0) -> float:
    """Exponentially weighted moving average of one-way delay samples."""
    est = initial
    n = 0
    for s in samples:
        est = weight * s + (1.0 - weight) * est
        n += 1
    if n == 0:
        raise NoSamples("no delay samples")
    return est


class DelayEstimator:
    """Running EWMA of coordinator-to-learner delays, one per learner.

    ``estimate`` combines the per-learner averages with ``aggregate`` ("max"
    or "mean").  A static value, when configured, overrides every measurement.
    """

    def __init__(self, weight: float = EWMA_WEIGHT, static: Optional[float] = None,
                 aggregate: str = "max"):
        if aggregate not in ("max", "mean"):
            raise ValueError(f"unknown aggregate {aggregate!r}")
        self.weight = weight
        self.static = static
        self.aggregate = aggregate
        self.per_source: dict = {}
        self.samples = 0
        self.seeded: Optional[float] = None

    def seed(self, value: float) -> None:
        """Provisional estimate used until the first real sample arrives."""
        if not self.per_source:
            self.seeded = max(0.0, value)

    def add(self, sample: float, source=None) -> None:
        if sample < 0:
            # clock skew can make one-way samples negative
            sample = 0.0
        self.seeded = None
        prev = self.per_source.get(source, 0.0)
        self.per_source[source] = self.weight * sample + (1.0 - self.weight) * prev
        self.samples += 1

    @property
    def estimate(self) -> float:
        if self.static is not None:
            return self.static
        if not self.per_source:
            return self.seeded or 0.0
        vals = self.per_source.values()
        if self.aggregate == "max":
            return max(vals)
        return sum(vals) / len(self.per_source)


def parse_compensation(spec) -> tuple[str, float]:
    """Parse ``auto | off | neg-auto | fixed:<ms>`` into (mode, fixed seconds)."""
    if spec is None or spec is False:
        return "off", 0.0
    if spec is True:
        return "auto", 0.0
    s = str(spec).strip().lower()
    if s in ("off", "auto", "neg-auto"):
        return s, 0.0
    if s.startswith("fixed:"):
        return "fixed", float(s[6:]) / 1000.0
    raise ValueError(f"bad compensation setting {spec!r}")


def compensation_for(mode: str, fixed: float, avg_delay: float) -> float:
    if mode == "auto":
        return avg_delay
    if mode == "neg-auto":
        return -avg_delay
    if mode == "fixed":
        return fixed
    return 0.0


class ClockSource:
    """Per-process clock: a base time function plus a constant skew."""

    def __init__(self, base: Callable[[], float] = time.monotonic, skew: float = 0.0):
        self._base = base
        self.skew = skew
        self._last = -math.inf

    def now(self) -> float:
        t = self._base() + self.skew
        # monotonic per process even if the base jitters
        if t < self._last:
            t = self._last
        self._last = t
        return t


class Pacer:
    """Skip pacing for one ring at its coordinator.

    ``propose`` is called with the skip count.  The caller reports decisions
    through ``ledger.record_decided`` so that only decided skips are counted.
    """

    def __init__(self, ledger: SkipLedger, mode: str = "off", fixed: float = 0.0,
                 estimator: Optional[DelayEstimator] = None):
        self.ledger = ledger
        self.mode = mode
        self.fixed = fixed
        self.estimator = estimator or DelayEstimator()

    def refresh_compensation(self) -> float:
        est = self.estimator.estimate
        self.ledger.avg_delay = est
        self.ledger.compensation = compensation_for(self.mode, self.fixed, est)
        return self.ledger.compensation

    def take_over(self, t_now: float) -> None:
        """Keep the lead a previous coordinator built up through compensation.

        Without samples of its own, a new coordinator would otherwise pause
        skips until real time caught up with the ring's slot count.
        """
        if self.mode == "auto" and self.estimator.static is None:
            lead = self.ledger.consumed / self.ledger.lam - (t_now - self.ledger.t_ref)
            self.estimator.seed(lead)

    def skips_due(self, t_now: float) -> int:
        if self.mode == "off":
            return compute_skips(self.ledger, t_now)
        self.refresh_compensation()
        return compute_skips_compensated(self.ledger, t_now)

    def on_tick(self, t_now: float, is_coordinator: bool, propose: Callable[[int], None]) -> int:
        if not is_coordinator:
            raise NotCoordinator("skip tick at a non-coordinator")
        n = self.skips_due(t_now)
        if n > 0:
            self.ledger.pending_slots += n
            propose(n)
        return n
