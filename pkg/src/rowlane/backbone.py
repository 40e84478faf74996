"""Global feature correlator: patch-token self-attention over the BEV grid.

The BEV image is cut into patches, linearly embedded, given learned
positional embeddings, run through a stack of encoder blocks, then
projected and re-assembled to (C_head, H_BEV, W_BEV). Every output cell
depends on every input cell once depth >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import attention_block, init_attention_block
from .tensor import (
    ConfigError,
    Tensor,
    add,
    affine,
    normal_param,
    reshape,
    transpose,
    zeros_param,
)


@dataclass
class BackboneConfig:
    depth: int = 3                 # encoder blocks; 0 is a linear diagnostic mode
    c_head: int = 64
    patch: tuple[int, int] = (2, 2)
    n_heads: int = 4

    def validate(self, h_bev: int, w_bev: int, c_bev: int):
        if self.depth < 0:
            raise ConfigError("backbone depth must be >= 0 (0 = linear diagnostic)")
        ph, pw = self.patch
        if h_bev % ph or w_bev % pw:
            raise ConfigError(
                f"grid {h_bev}x{w_bev} not divisible by patch {ph}x{pw}")
        if self.c_head % self.n_heads:
            raise ConfigError(f"c_head {self.c_head} not divisible by {self.n_heads} heads")


def init_backbone_params(cfg: BackboneConfig, h_bev: int, w_bev: int, c_bev: int,
                         rng: np.random.Generator, dtype=None) -> dict:
    cfg.validate(h_bev, w_bev, c_bev)
    ph, pw = cfg.patch
    n_tokens = (h_bev // ph) * (w_bev // pw)
    patch_dim = c_bev * ph * pw
    d = cfg.c_head
    params: dict = {
        "patch_w": normal_param(rng, (patch_dim, d), dtype=dtype),
        "patch_b": zeros_param((d,), dtype=dtype),
        "pos": normal_param(rng, (n_tokens, d), dtype=dtype),
        "out_w": normal_param(rng, (d, cfg.c_head * ph * pw), dtype=dtype),
        "out_b": zeros_param((cfg.c_head * ph * pw,), dtype=dtype),
    }
    for i in range(cfg.depth):
        block = init_attention_block(d, cfg.n_heads, rng, dtype=dtype)
        for k, v in block.items():
            params[f"block{i}.{k}"] = v
    return params


def patchify(x: Tensor, ph: int, pw: int) -> Tensor:
    """(C, H, W) -> (H/ph * W/pw, C*ph*pw) token matrix, row-major patch order."""
    c, h, w = x.shape
    t = reshape(x, (c, h // ph, ph, w // pw, pw))
    t = transpose(t, (1, 3, 0, 2, 4))
    return reshape(t, ((h // ph) * (w // pw), c * ph * pw))


def unpatchify(tokens: Tensor, c: int, h: int, w: int, ph: int, pw: int) -> Tensor:
    """Inverse of patchify for a (T, c*ph*pw) token matrix."""
    t = reshape(tokens, (h // ph, w // pw, c, ph, pw))
    t = transpose(t, (2, 0, 3, 1, 4))
    return reshape(t, (c, h, w))


def correlate(bev: Tensor, cfg: BackboneConfig, params: dict) -> Tensor:
    """BEV image (C_BEV, H, W) -> feature map (C_head, H, W)."""
    c_bev, h, w = bev.shape
    cfg.validate(h, w, c_bev)
    ph, pw = cfg.patch
    tokens = affine(patchify(bev, ph, pw), params["patch_w"], params["patch_b"])
    tokens = add(tokens, params["pos"])
    for i in range(cfg.depth):
        block = {k.split(".", 1)[1]: v for k, v in params.items()
                 if k.startswith(f"block{i}.")}
        tokens = attention_block(tokens, block, cfg.n_heads)
    out = affine(tokens, params["out_w"], params["out_b"])
    return unpatchify(out, cfg.c_head, h, w, ph, pw)
