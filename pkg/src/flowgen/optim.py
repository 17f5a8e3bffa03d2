"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        return cls(
            m=np.zeros(n, dtype=dtype),
            v=np.zeros(n, dtype=dtype),
            t=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state):
    """One Adam update; returns (new_params, new_state)."""
    p = as_tensor(params).data
    g = as_tensor(grads).data
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {p.shape}, grads {g.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        m=m, v=v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return Tensor(new_p), new_state
