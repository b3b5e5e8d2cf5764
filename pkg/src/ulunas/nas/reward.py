"""Complexity-aware reward: quality gain over a baseline, penalized above a MACS target."""

from dataclasses import dataclass

from ..errors import InvalidInputError


@dataclass(frozen=True)
class RewardConfig:
    """Reward constants.

    Attributes:
        q0: Baseline quality; candidates scoring exactly this get zero reward.
        target_macs: MACS/s budget.
        omega_plus: Exponent applied above the budget (negative = penalty).
        omega_minus: Exponent applied at or below the budget.
    """

    q0: float = 1.0
    target_macs: float = 30e6
    omega_plus: float = -0.15
    omega_minus: float = 0.0

    def __post_init__(self):
        if self.target_macs <= 0:
            raise InvalidInputError("target_macs must be positive")


def reward(q, macs, cfg=RewardConfig()):
    """``(q - q0) * (macs / target) ** omega`` with ``omega`` picked by which side of the target ``macs`` is."""
    if not macs > 0:
        raise InvalidInputError(f"MACS must be positive, got {macs}")
    omega = cfg.omega_plus if macs > cfg.target_macs else cfg.omega_minus
    return (q - cfg.q0) * (macs / cfg.target_macs) ** omega
