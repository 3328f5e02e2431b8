"""Adam with bias correction, plus the warmup / inverse-sqrt LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .layers import Parameter


class GradientError(RuntimeError):
    """A parameter arrived at the optimizer with a non-finite gradient."""


@dataclass
class AdamState:
    """Optimizer state: decay rates, step counter and per-parameter moments."""

    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if not np.isfinite(p.grad).all():
            raise GradientError(f"non-finite gradient in parameter '{p.name}'; step refused")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad = np.zeros_like(p.data)
    return state


def warmup_inverse_sqrt_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to peak_lr, then decay proportional to 1/sqrt(step)."""
    if step < 1:
        raise ValueError("schedule steps are 1-based")
    if warmup_steps < 1:
        return peak_lr / math.sqrt(step)
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * math.sqrt(warmup_steps / step)
