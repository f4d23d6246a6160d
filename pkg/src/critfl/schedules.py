"""Round-indexed policies for local data ratio and client availability."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._util import TAG_POOL, ceil_fraction, stream
from .errors import ConfigError


def _check_fraction(name, value):
    if not 0 < value <= 1:
        raise ConfigError(f"{name} must lie in (0, 1], got {value}")


def _check_round(name, value):
    if value is not None and (isinstance(value, bool) or int(value) != value or value < 0):
        raise ConfigError(f"{name} must be a nonnegative integer or None (never), got {value!r}")


@dataclass(frozen=True)
class DataSchedule:
    """Fraction of each client's data in use: ``ratio`` before ``recover_round``, ``after_ratio`` from it on.

    ``recover_round=None`` means the switch never happens.  The default
    ``after_ratio=1.0`` is the recover-round protocol; setting ``ratio=1.0``
    and a smaller ``after_ratio`` gives the all-data-then-partial heuristic.
    """
    ratio: float = 1.0
    recover_round: Optional[int] = 0
    after_ratio: float = 1.0

    def __post_init__(self):
        _check_fraction("ratio", self.ratio)
        _check_fraction("after_ratio", self.after_ratio)
        _check_round("recover_round", self.recover_round)

    @classmethod
    def partial_after(cls, switch_round: int, ratio: float) -> "DataSchedule":
        return cls(ratio=1.0, recover_round=switch_round, after_ratio=ratio)


def active_ratio(schedule: DataSchedule, t: int) -> float:
    if t < 0:
        raise ConfigError(f"round index must be >= 0, got {t}")
    if schedule.recover_round is None or t < schedule.recover_round:
        return schedule.ratio
    return schedule.after_ratio


@dataclass(frozen=True)
class ParticipationSchedule:
    """Fraction of clients eligible for selection before and after ``switch_round``."""
    switch_round: Optional[int] = None
    early_fraction: float = 1.0
    late_fraction: float = 1.0

    def __post_init__(self):
        _check_fraction("early_fraction", self.early_fraction)
        _check_fraction("late_fraction", self.late_fraction)
        _check_round("switch_round", self.switch_round)

    def fraction_at(self, t: int) -> float:
        if self.switch_round is None or t < self.switch_round:
            return self.early_fraction
        return self.late_fraction

    def min_pool_size(self, n_clients: int) -> int:
        fractions = [self.early_fraction]
        if self.switch_round is not None:
            fractions.append(self.late_fraction)
        return min(ceil_fraction(f, n_clients) for f in fractions)


def participation_pool(schedule: ParticipationSchedule, t: int, n_clients: int, seed: int,
                       clients_per_round: int = 1) -> list[int]:
    """Client ids eligible at round ``t``, in ascending order.

    The pool is a prefix of one seeded permutation of ``0..N-1``, so a smaller
    late pool is always contained in the early pool.
    """
    if t < 0:
        raise ConfigError(f"round index must be >= 0, got {t}")
    size = ceil_fraction(schedule.fraction_at(t), n_clients)
    if size < clients_per_round:
        raise ConfigError(
            f"participation pool of {size} clients at round {t} is smaller than "
            f"clients_per_round={clients_per_round}"
        )
    order = stream(seed, TAG_POOL).permutation(n_clients)
    return sorted(order[:size].tolist())


def detect_critical_end(cum_traces: Sequence[float], fraction: float = 0.1) -> Optional[int]:
    """Advisory only: first round after the peak where the per-round growth of
    the cumulative trace drops below ``fraction`` of its maximum growth.

    Returns None if that never happens within the history.
    """
    c = np.asarray(cum_traces, dtype=np.float64)
    if len(c) < 2:
        return None
    growth = np.diff(c, prepend=0.0)
    peak = int(np.argmax(growth))
    below = np.flatnonzero(growth[peak:] < fraction * growth[peak])
    return int(peak + below[0]) if len(below) else None
