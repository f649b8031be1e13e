"""Adam optimizer over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LengthMismatch(ValueError):
    pass


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for one model."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, lr: float = 1e-4, **kwargs) -> "AdamState":
        return cls(
            m=np.zeros(n_params, dtype=np.float64),
            v=np.zeros(n_params, dtype=np.float64),
            lr=lr,
            **kwargs,
        )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update; returns (new_params, state).

    The moment buffers are updated in place; the step counter increments by
    exactly one even for a zero gradient.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise LengthMismatch(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    state.step += 1
    g = grads.astype(np.float64, copy=False)
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_params = (params.astype(np.float64, copy=False) - update).astype(
        params.dtype, copy=False
    )
    return new_params, state
