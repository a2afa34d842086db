"""Online average-reward tracking and centered TD errors."""
from __future__ import annotations

import math
from dataclasses import dataclass


class NonFiniteReward(ValueError):
    pass


@dataclass
class AverageTracker:
    """Exponential moving estimate of the policy's average reward per step."""
    beta: float = 2e-3
    r_bar: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    def update(self, r: float) -> float:
        if not math.isfinite(r):
            raise NonFiniteReward(f"reward {r}")
        self.r_bar += self.beta * (r - self.r_bar)
        return self.r_bar


def centered_delta(r: float, r_bar: float, v_next: float, v_curr: float) -> float:
    """Differential TD error; pass ``v_next=0`` on terminal steps."""
    return (r - r_bar) + v_next - v_curr
