"""Adam with bias correction over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """Return updated ``(params, state)``; inputs are not mutated."""
    if state.lr <= 0:
        raise ArgumentError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ArgumentError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        m = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, new_m, new_v)
    return new_params, new_state
