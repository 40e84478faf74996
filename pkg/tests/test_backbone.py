"""Backbone: patch plumbing, symmetry, global mixing, gradients."""

import numpy as np
import pytest

from rowlane.backbone import BackboneConfig, correlate, init_backbone_params, patchify, unpatchify
from rowlane.gradcheck import finite_diff_check
from rowlane.tensor import ConfigError, Tensor, mul, sum_all


def test_patchify_roundtrip_preserves_arrangement():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 6))
    tokens = patchify(Tensor(x), 2, 2)
    assert tokens.shape == (6, 12)
    back = unpatchify(tokens, 3, 4, 6, 2, 2)
    np.testing.assert_array_equal(back.data, x)


def test_depth_zero_is_linear_and_local_to_patches():
    cfg = BackboneConfig(depth=0, c_head=8, patch=(2, 2), n_heads=4)
    rng = np.random.default_rng(1)
    params = init_backbone_params(cfg, 4, 4, 3, rng)
    x = rng.normal(size=(3, 4, 4))
    out1 = correlate(Tensor(x), cfg, params).data
    x2 = x.copy()
    x2[:, 0, 0] += 1.0  # inside patch (0, 0)
    out2 = correlate(Tensor(x2), cfg, params).data
    changed = np.argwhere(np.any(out1 != out2, axis=0))
    assert changed.size > 0
    assert np.all(changed[:, 0] < 2) and np.all(changed[:, 1] < 2)
    # linearity: scaling the input delta scales the output delta
    x3 = x.copy()
    x3[:, 0, 0] += 2.0
    out3 = correlate(Tensor(x3), cfg, params).data
    np.testing.assert_allclose(out3 - out1, 2.0 * (out2 - out1), rtol=0, atol=1e-9)


def test_zero_input_zero_pos_is_spatially_uniform():
    cfg = BackboneConfig(depth=2, c_head=8, patch=(1, 1), n_heads=4)
    rng = np.random.default_rng(2)
    params = init_backbone_params(cfg, 4, 4, 3, rng)
    params["pos"].data[:] = 0.0
    out = correlate(Tensor(np.zeros((3, 4, 4))), cfg, params).data
    ref = out[:, 0, 0]
    np.testing.assert_allclose(out, ref[:, None, None], rtol=0, atol=1e-12)


def test_global_mixing_at_depth_3():
    cfg = BackboneConfig(depth=3, c_head=8, patch=(2, 2), n_heads=4)
    rng = np.random.default_rng(3)
    params = init_backbone_params(cfg, 8, 8, 4, rng)
    x = rng.normal(size=(4, 8, 8))
    out1 = correlate(Tensor(x), cfg, params).data
    x2 = x.copy()
    x2[:, 3, 5] += 0.5
    out2 = correlate(Tensor(x2), cfg, params).data
    changed = np.any(out1 != out2, axis=0)
    assert changed.mean() >= 0.99


def test_output_shape_contract():
    cfg = BackboneConfig(depth=1, c_head=16, patch=(2, 2), n_heads=4)
    rng = np.random.default_rng(4)
    params = init_backbone_params(cfg, 6, 8, 5, rng)
    out = correlate(Tensor(rng.normal(size=(5, 6, 8))), cfg, params)
    assert out.shape == (16, 6, 8)


def test_divisibility_config_error():
    cfg = BackboneConfig(depth=1, c_head=8, patch=(2, 2), n_heads=4)
    with pytest.raises(ConfigError, match="patch"):
        init_backbone_params(cfg, 5, 8, 3, np.random.default_rng(0))


def test_depth1_gradcheck():
    cfg = BackboneConfig(depth=1, c_head=8, patch=(2, 2), n_heads=4)
    rng = np.random.default_rng(5)
    params = init_backbone_params(cfg, 4, 4, 3, rng)
    x = rng.normal(size=(3, 4, 4))
    w = rng.normal(size=(8, 4, 4))

    def loss():
        return sum_all(mul(correlate(Tensor(x), cfg, params), w))

    assert finite_diff_check(loss, params) <= 1e-4
