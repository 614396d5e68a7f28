"""
Adam with decoupled weight decay, and the Noam learning-rate schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> None:
    """
    One in-place Adam update for every parameter that has a gradient.

    Weight decay is decoupled: p <- p * (1 - lr * wd) before the moment update.
    Parameters without a gradient (frozen ones) are left untouched.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise ValueError(f"gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        if state.weight_decay:
            param *= 1.0 - lr * state.weight_decay
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def noam_lr(step: int, lr_peak: float, warmup: int, min_lr: float = 0.0) -> float:
    """
    Noam annealing, scaled so the peak at step == warmup equals lr_peak.

        lr = max(min_lr, lr_peak * sqrt(warmup) * min(step^-0.5, step * warmup^-1.5))
    """
    if step < 1:
        raise ValueError(f"noam schedule is defined from step 1, got {step}")
    # same expression with sqrt(warmup) folded in, exact at step == warmup
    scale = min(math.sqrt(warmup / step), step / warmup)
    return max(min_lr, lr_peak * scale)
