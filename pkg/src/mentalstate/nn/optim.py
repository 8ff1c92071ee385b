"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param, grad, state: AdamState):
    """One update. Returns (new_param, new_state); inputs are not mutated."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeMismatch(f"param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m.astype(state.m.dtype), v.astype(state.v.dtype), t,
                          state.lr, state.beta1, state.beta2, state.eps)
    return new.astype(param.dtype), new_state


class Adam:
    """Keeps one AdamState per parameter and updates arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.states: dict[int, AdamState] = {}

    def step(self, params, grads):
        for i, (p, g) in enumerate(zip(params, grads)):
            state = self.states.get(i)
            if state is None:
                state = AdamState.like(p, **self.hyper)
            new, self.states[i] = adam_step(p, g, state)
            p[...] = new
