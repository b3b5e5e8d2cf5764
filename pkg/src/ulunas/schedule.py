"""Learning-rate schedules: linear warmup with cosine decay, and halving on plateau."""

import math
from dataclasses import dataclass

from .errors import InvalidInputError

KINDS = ("warmup_cosine", "plateau_halving")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "warmup_cosine"
    warmup_steps: int = 25000
    total_steps: int = 250000
    lr_start: float = 1e-6
    lr_peak: float = 1e-3
    plateau_patience: int = 5
    plateau_factor: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidInputError("need 0 <= warmup_steps < total_steps")
        if self.plateau_patience < 1 or not 0 < self.plateau_factor < 1:
            raise InvalidInputError("invalid plateau settings")


def plateau_halvings(history, patience):
    """Number of reductions triggered by a sequence of per-epoch validation losses.

    A loss counts as progress only if it is strictly below the best so far;
    every ``patience`` consecutive epochs without progress trigger one reduction.
    """
    best = math.inf
    stalled = 0
    cuts = 0
    for loss in history:
        if loss < best:
            best = loss
            stalled = 0
        else:
            stalled += 1
            if stalled == patience:
                cuts += 1
                stalled = 0
    return cuts


def lr_at(step, cfg=ScheduleConfig(), history=()):
    """Learning rate for ``warmup_cosine`` at optimizer ``step``, or for
    ``plateau_halving`` after the validation losses in ``history``.
    """
    if step < 0:
        raise InvalidInputError(f"step must be >= 0, got {step}")
    if cfg.kind == "plateau_halving":
        return cfg.lr_peak * cfg.plateau_factor ** plateau_halvings(history, cfg.plateau_patience)
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_peak
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))
