"""Central finite-difference verification of tape gradients.

The checker is the independent oracle for every backward pass in the
package: it never reuses analytic machinery beyond calling the forward
function twice per coordinate.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def finite_diff_check(f, params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f: zero-argument callable rebuilding the scalar loss from `params`.
    params: named tensors to perturb; names appear in diagnostics.
    Returns max over all coordinates of
    |analytic - central| / max(1, |central|). Run in float64.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 params, {name!r} is {p.dtype}")
        p.grad = None

    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ValueError(f"f must return a scalar, got shape {loss.shape}")
    tape.backward(loss)

    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None

    worst = 0.0
    for name, p in params.items():
        flat = p.data.ravel()
        a_flat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite loss while perturbing {name!r} coordinate {i}"
                )
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
