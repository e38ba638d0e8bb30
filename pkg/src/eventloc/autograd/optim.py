"""Adam with decoupled weight decay and a single-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ModelWeights

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def onecycle_lr(step: int, total_steps: int, peak: float, pct_start: float = 0.3, div: float = 25.0) -> float:
    """Linear warm-up from peak/div to peak, then cosine decay back to peak/div."""
    low = peak / div
    warm = max(1, int(round(pct_start * total_steps)))
    if step <= warm:
        return low + (peak - low) * step / warm
    frac = min(1.0, (step - warm) / max(1, total_steps - warm))
    return low + (peak - low) * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_step(weights: ModelWeights, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> AdamState:
    """Update ``weights`` in place from ``grads`` (name -> array) and return the advanced state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    missing = [k for k in weights.params if k not in grads or grads[k] is None]
    if missing:
        raise KeyError(f"missing gradient for parameters: {', '.join(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in weights.params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        state.m[name] = m
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(p.dtype)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total
