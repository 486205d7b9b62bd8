"""Adam with bias correction, updating parameter arrays in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-5,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8):
    """One Adam update of every array in ``params`` that has a gradient.

    Moments are created lazily (zeros, float64). Returns ``(params, state)``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        elif m.shape != p.shape:
            raise ValueError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        v = state.v[name]
        g64 = g.astype(np.float64, copy=False)
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * g64 * g64
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype)
    return params, state
