"""Adam with per-block moment buffers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(values: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.

    ``values`` and ``grads`` map block names to arrays; only blocks present in
    ``grads`` are updated.  Returns ``(new_values, new_state)`` and leaves the
    inputs untouched.
    """
    t = state.step + 1
    new_values = dict(values)
    m_out = dict(state.m)
    v_out = dict(state.v)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        x = values[name]
        if g.shape != x.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {x.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(x)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(x)) + (1.0 - beta2) * g * g
        new_values[name] = x - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_out[name] = m
        v_out[name] = v
    return new_values, AdamState(m_out, v_out, t)
