"""Per-epoch learning-rate schedule: linear warmup followed by step decay."""
from __future__ import annotations

import bisect
import csv
import io
from decimal import Decimal
from dataclasses import dataclass

from .exceptions import ConfigurationError, ScheduleError


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    total_epochs: int = 120

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 < self.decay_factor < 1:
            raise ConfigurationError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigurationError(f"decay_epochs must be strictly increasing, got {d}")
        if d and d[0] <= self.warmup_epochs:
            raise ConfigurationError(f"decay epochs must come after warmup ({self.warmup_epochs}), got {d}")

    def plateau(self, k: int) -> float:
        # decimal product, rounded once: 3.5e-4 * 0.1**2 gives 3.5e-06 rather than 3.5000000000000004e-06
        return float(Decimal(repr(self.base_lr)) * Decimal(repr(self.decay_factor)) ** k)

    def lr_at(self, t: int) -> float:
        return lr_at(self, t)


def lr_at(schedule: LRSchedule, t: int) -> float:
    """Learning rate for 1-based epoch ``t``.

    Epochs ``1..warmup_epochs`` ramp linearly to ``base_lr`` (``base_lr * t /
    warmup_epochs``). Afterwards the rate is ``base_lr`` times
    ``decay_factor`` once per decay epoch already passed; a decay epoch ``e``
    takes effect from epoch ``e + 1``.
    """
    if not 1 <= t <= schedule.total_epochs:
        raise ScheduleError(f"epoch {t} outside [1, {schedule.total_epochs}]")
    if t <= schedule.warmup_epochs:
        return float(Decimal(repr(schedule.base_lr)) * t / schedule.warmup_epochs)
    passed = bisect.bisect_left(schedule.decay_epochs, t)
    return schedule.plateau(passed)


def schedule_table(schedule: LRSchedule) -> list[tuple[int, float]]:
    return [(t, lr_at(schedule, t)) for t in range(1, schedule.total_epochs + 1)]


def schedule_csv(schedule: LRSchedule) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr"])
    for t, lr in schedule_table(schedule):
        writer.writerow([t, repr(lr)])
    return buf.getvalue()
