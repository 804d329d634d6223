"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
              state: AdamState = None, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Update ``params`` in place.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    """
    state = state if state is not None else AdamState()
    state.t += 1
    bc1 = 1 - beta1 ** state.t
    bc2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * (update + weight_decay * p.data)
    return state


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state = AdamState()

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.lr, self.weight_decay, self.state, self.betas[0], self.betas[1], self.eps)
