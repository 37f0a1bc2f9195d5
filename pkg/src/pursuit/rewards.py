"""Individual and global pursuit rewards."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError
from .traffic_sim import StepEvents

SIGN_CONVENTIONS = ("closing_positive", "paper_literal")


@dataclass(frozen=True)
class RewardConfig:
    c1: float = -0.01
    c2: float = 10.0
    beta: float = 2.0
    # closing_positive rewards approaching the nearest evader; paper_literal
    # keeps beta * min(d_next - d_now) with its printed sign
    shaping_sign: str = "closing_positive"

    def validate(self) -> None:
        if self.c1 > 0:
            raise ConfigError("reward.c1 must be <= 0")
        if self.beta < 0:
            raise ConfigError("reward.beta must be >= 0")
        if self.shaping_sign not in SIGN_CONVENTIONS:
            raise ConfigError(f"reward.shaping_sign must be one of {SIGN_CONVENTIONS}")


@dataclass(frozen=True)
class RewardBreakdown:
    step_penalty: float
    capture_share: float
    shaping: float

    @property
    def total(self) -> float:
        return self.step_penalty + self.capture_share + self.shaping


def distance_shaping(before: dict[int, float], after: dict[int, float], cfg: RewardConfig) -> float:
    common = [n for n in before if n in after]
    if not common:
        return 0.0
    delta = min(after[n] - before[n] for n in common)
    return -cfg.beta * delta if cfg.shaping_sign == "closing_positive" else cfg.beta * delta


def individual_reward(m: int, events: StepEvents, cfg: RewardConfig) -> RewardBreakdown:
    share = 0.0
    captured = False
    for event in events.captures:
        if m in event.pursuers:
            share += cfg.c2 / event.g
            captured = True
    evaders_left = bool(events.dist_after[m])
    penalty = cfg.c1 if evaders_left and not captured else 0.0
    return RewardBreakdown(penalty, share, distance_shaping(events.dist_before[m], events.dist_after[m], cfg))


def global_reward(individuals: Sequence[float]) -> float:
    total = 0.0
    for r in individuals:
        total += r
    return total
