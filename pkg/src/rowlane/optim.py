"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class AdamState:
    """Per-parameter first/second moments plus the shared step counter.

    lr defaults to 1e-4; beta1/beta2/eps are the conventional
    0.9/0.999/1e-8.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam state for {name!r} has shape {m.shape}, param is {p.shape}")
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"grad for {name!r} has shape {g.shape}, param is {p.shape}")
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
