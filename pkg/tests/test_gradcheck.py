"""The finite-difference checker itself: trivial oracles and failure modes."""

import numpy as np
import pytest

from rowlane.gradcheck import finite_diff_check
from rowlane.tensor import Tensor, mul, param, sum_all


def test_sum_of_squares():
    p = param(np.random.default_rng(0).normal(size=(4, 3)))
    err = finite_diff_check(lambda: sum_all(mul(p, p)), {"p": p})
    assert err <= 1e-9


def test_constant_function_has_zero_gradient():
    p = param(np.random.default_rng(1).normal(size=5))
    err = finite_diff_check(lambda: sum_all(Tensor(np.array(2.5))), {"p": p})
    assert err == 0.0
    assert p.grad is None or not p.grad.any()


def test_float32_params_rejected():
    p = param(np.zeros(3), dtype=np.float32)
    with pytest.raises(ValueError, match="float64"):
        finite_diff_check(lambda: sum_all(p), {"p": p})


def test_nonfinite_loss_names_parameter():
    p = param(np.array([1.0]))

    def f():
        # finite at the center point, blows up under any perturbation
        if abs(float(p.data[0]) - 1.0) > 1e-9:
            return sum_all(mul(p, np.inf))
        return sum_all(p)

    with pytest.raises(FloatingPointError, match="'p'"):
        finite_diff_check(f, {"p": p})
