"""Graph-temperature and learning-rate schedules. Epochs are 1-based."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_g_init: float = 0.1
    warmup_epochs: int = 15
    floor: float = 1e-3

    def __post_init__(self):
        if not self.tau_g_init > 0:
            raise ConfigError("tau_g_init must be positive")
        if self.warmup_epochs < 2:
            raise ConfigError("warmup_epochs must be at least 2 for the log base to make sense")
        if not self.floor > 0:
            raise ConfigError("temperature floor must be positive")


def graph_temperature(sched: TemperatureSchedule, epoch: int) -> float:
    """Constant through warm-up, then tau_init / log_W(epoch), never below the floor."""
    if epoch < 1:
        raise ConfigError(f"epochs are 1-based, got {epoch}")
    if epoch <= sched.warmup_epochs:
        return sched.tau_g_init
    ratio = math.log(epoch) / math.log(sched.warmup_epochs)
    return max(sched.floor, sched.tau_g_init / ratio)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.05
    milestones: tuple[int, ...] = field(default=(150, 180, 210))
    factor: float = 0.1
    warmup_epochs: int = 15

    def __post_init__(self):
        if not self.base_lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0 < self.factor <= 1:
            raise ConfigError("decay factor must lie in (0, 1]")


def learning_rate(sched: LrSchedule, epoch: int) -> float:
    """Linear warm-up from base/W to base over W epochs, then step decay after each milestone."""
    if epoch < 1:
        raise ConfigError(f"epochs are 1-based, got {epoch}")
    if sched.warmup_epochs > 0 and epoch <= sched.warmup_epochs:
        return sched.base_lr * epoch / sched.warmup_epochs
    passed = sum(1 for m in sched.milestones if epoch > m)
    return sched.base_lr * sched.factor ** passed
