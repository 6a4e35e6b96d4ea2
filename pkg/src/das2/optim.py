"""Bias-corrected Adam (Kingma & Ba) on lists of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if len(params) != len(grads):
        raise ShapeError("gradient list length", len(params), len(grads))
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError("gradient shape", np.shape(p), np.shape(g))
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * g * g
        new_p.append(p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, AdamState(new_m, new_v, t)
