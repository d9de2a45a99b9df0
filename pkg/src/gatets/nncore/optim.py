"""AdamW with decoupled weight decay and a linear-warm-up cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    base_lr: float = 1e-3
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0 or self.base_lr < 0:
            raise ConfigError("eps must be positive; weight_decay and base_lr non-negative")


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float | None = None,
) -> bool:
    """Update ``params`` in place. Returns False (and skips) on a non-finite gradient.

    Decay is applied to the parameter before the moment-based step:
    ``theta -= lr * wd * theta`` then ``theta -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    lr = state.base_lr if lr is None else lr
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            return False

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            v = state.second_moment[name] = np.zeros_like(p)
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


@dataclass(frozen=True)
class ScheduleState:
    warmup_steps: int
    total_steps: int
    base_lr: float

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")


def cosine_lr(step: int, sched: ScheduleState) -> float:
    """Linear ramp to ``base_lr`` over the warm-up, then half-cosine decay to 0."""
    if not 0 <= step <= sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return max(0.0, sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))
