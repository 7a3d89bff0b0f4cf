"""SGD with momentum under a cosine schedule, and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class CosineSchedule:
    lr0: float = 0.1
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")


def cosine_lr(t: int, schedule: CosineSchedule) -> float:
    """Half-cosine annealing from ``lr0`` at t=0 to 0 at ``total_steps``.

    Steps past the horizon are clamped to the final value.
    """
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if t >= schedule.total_steps:
        return 0.0
    return 0.5 * schedule.lr0 * (1.0 + math.cos(math.pi * t / schedule.total_steps))


@dataclass
class SgdMomentumState:
    schedule: CosineSchedule = field(default_factory=CosineSchedule)
    momentum: float = 0.9
    velocity: Optional[np.ndarray] = None


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, state: SgdMomentumState, step_index: int) -> np.ndarray:
    """``v <- mu * v + g``; ``p <- p - lr(t) * v``. Returns the new parameter."""
    if param.shape != grad.shape:
        raise ValueError(f"sgd: param shape {param.shape} != grad shape {grad.shape}")
    if state.velocity is None:
        state.velocity = np.zeros_like(param)
    elif state.velocity.shape != param.shape:
        raise ValueError(f"sgd: velocity shape {state.velocity.shape} != param shape {param.shape}")
    state.velocity = state.momentum * state.velocity + grad
    return param - cosine_lr(step_index, state.schedule) * state.velocity


@dataclass
class AdamState:
    lr: float = 0.006
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update. Returns the new parameter."""
    if param.shape != grad.shape:
        raise ValueError(f"adam: param shape {param.shape} != grad shape {grad.shape}")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    elif state.m.shape != param.shape:
        raise ValueError(f"adam: moment shape {state.m.shape} != param shape {param.shape}")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**t)
    v_hat = state.v / (1 - state.beta2**t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
