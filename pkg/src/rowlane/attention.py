"""Transformer encoder block: multi-head self-attention + feed-forward.

Built from the tape primitives, so gradients come for free. Post-norm
layout: x = LN(x + MHA(x)); x = LN(x + FF(x)). Feed-forward width is
4*d_model; default head count is 4.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ConfigError,
    Tensor,
    add,
    affine,
    bmm,
    layer_norm,
    mul,
    normal_param,
    ones_param,
    relu,
    reshape,
    softmax_axis,
    transpose,
    zeros_param,
)


def init_attention_block(d_model: int, n_heads: int, rng: np.random.Generator,
                         dtype=None, ff_mult: int = 4) -> dict[str, Tensor]:
    """Parameters for one encoder block; weights normal(0, 0.02), biases zero."""
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
    d_ff = ff_mult * d_model
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = normal_param(rng, (d_model, d_model), dtype=dtype)
        p["b" + name[1]] = zeros_param((d_model,), dtype=dtype)
    p["ln1_g"] = ones_param((d_model,), dtype=dtype)
    p["ln1_b"] = zeros_param((d_model,), dtype=dtype)
    p["w1"] = normal_param(rng, (d_model, d_ff), dtype=dtype)
    p["b1"] = zeros_param((d_ff,), dtype=dtype)
    p["w2"] = normal_param(rng, (d_ff, d_model), dtype=dtype)
    p["b2"] = zeros_param((d_model,), dtype=dtype)
    p["ln2_g"] = ones_param((d_model,), dtype=dtype)
    p["ln2_b"] = zeros_param((d_model,), dtype=dtype)
    return p


def multi_head_self_attention(x: Tensor, params: dict[str, Tensor], n_heads: int) -> Tensor:
    """Scaled dot-product self-attention sublayer, (T, D) -> (T, D).

    With a single token the softmax over its one key is 1, so the output
    is exactly the output projection of that token's value.
    """
    t, d = x.shape
    if d % n_heads != 0:
        raise ConfigError(f"token dim {d} not divisible by {n_heads} heads")
    d_head = d // n_heads
    q = affine(x, params["wq"], params["bq"])
    k = affine(x, params["wk"], params["bk"])
    v = affine(x, params["wv"], params["bv"])
    # (T, D) -> (heads, T, d_head)
    q = transpose(reshape(q, (t, n_heads, d_head)), (1, 0, 2))
    k = transpose(reshape(k, (t, n_heads, d_head)), (1, 0, 2))
    v = transpose(reshape(v, (t, n_heads, d_head)), (1, 0, 2))
    scores = mul(bmm(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_head))
    attn = softmax_axis(scores, 2)
    mixed = bmm(attn, v)  # (heads, T, d_head)
    mixed = reshape(transpose(mixed, (1, 0, 2)), (t, d))
    return affine(mixed, params["wo"], params["bo"])


def attention_block(x: Tensor, params: dict[str, Tensor], n_heads: int,
                    ln_eps: float = 1e-5) -> Tensor:
    """One encoder block, (T, D) -> (T, D)."""
    h = add(x, multi_head_self_attention(x, params, n_heads))
    h = layer_norm(h, params["ln1_g"], params["ln1_b"], eps=ln_eps)
    ff = affine(relu(affine(h, params["w1"], params["b1"])), params["w2"], params["b2"])
    h = add(h, ff)
    return layer_norm(h, params["ln2_g"], params["ln2_b"], eps=ln_eps)
