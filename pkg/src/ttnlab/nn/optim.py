from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.

    Returns new ``(params, state)``; the inputs are left untouched so callers
    can keep snapshots for resets. Keys missing from ``grads`` are copied
    through unchanged.
    """
    t = state.t + 1
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for key, g in grads.items():
        p = params[key]
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * state.m.get(key, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(key, 0.0) + (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[key] = (p - update).astype(np.asarray(p).dtype)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(t, new_m, new_v)


def cosine_lr(lr0: float, step: float, total: float) -> float:
    """Cosine decay from ``lr0`` at step 0 to 0 at ``step == total``."""
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))
