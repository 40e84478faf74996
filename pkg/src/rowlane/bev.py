"""Point cloud to pseudo-BEV image: pillar binning, shared affine, cell max-pool.

Each in-range point is featurized as (x, y, z, extras..., dx, dy) with
offsets from its cell center, pushed through one shared affine + ReLU to
C_BEV channels, and max-pooled per cell. Retention is deterministic (first
max_points per cell in input order) and max ties break toward the lowest
point index, so the whole encoder is reproducible and finite-difference
checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import PointCloud
from .tensor import (
    ConfigError,
    Tensor,
    accumulate_grad,
    active_tape,
    affine,
    normal_param,
    record_op,
    relu,
    reshape,
    transpose,
    zeros_param,
)


@dataclass
class GridConfig:
    x_range: tuple[float, float] = (-8.0, 8.0)
    y_range: tuple[float, float] = (0.0, 30.0)
    h_bev: int = 48
    w_bev: int = 32
    c_bev: int = 32
    max_points_per_cell: int = 16
    n_extra: int = 1  # extra point channels beyond xyz (intensity)

    def validate(self):
        if self.h_bev < 4 or self.w_bev < 4:
            raise ConfigError(f"grid {self.h_bev}x{self.w_bev} below the 4x4 minimum")
        if self.c_bev < 1:
            raise ConfigError("c_bev must be >= 1")
        if self.max_points_per_cell < 1:
            raise ConfigError("max_points_per_cell must be >= 1")

    @property
    def point_feat_dim(self) -> int:
        return 3 + self.n_extra + 2  # xyz + extras + cell-center offsets


def init_encoder_params(cfg: GridConfig, rng: np.random.Generator, dtype=None) -> dict[str, Tensor]:
    return {
        "w": normal_param(rng, (cfg.point_feat_dim, cfg.c_bev), dtype=dtype),
        "b": zeros_param((cfg.c_bev,), dtype=dtype),
    }


def bin_points(pc: PointCloud, cfg: GridConfig):
    """Assign points to cells, drop out-of-range ones, keep first max_points per cell.

    Returns (features (N, F), cell_ids (N,), slots (N,)) where slots is each
    point's arrival rank within its cell.
    """
    pts = pc.points.astype(np.float64)
    x, y = pts[:, 0], pts[:, 1]
    cell_w = (cfg.x_range[1] - cfg.x_range[0]) / cfg.w_bev
    cell_h = (cfg.y_range[1] - cfg.y_range[0]) / cfg.h_bev
    col = np.floor((x - cfg.x_range[0]) / cell_w).astype(np.intp)
    row = np.floor((y - cfg.y_range[0]) / cell_h).astype(np.intp)
    ok = (col >= 0) & (col < cfg.w_bev) & (row >= 0) & (row < cfg.h_bev)
    pts, col, row = pts[ok], col[ok], row[ok]
    cell = row * cfg.w_bev + col

    # arrival rank within each cell (stable, input order)
    order = np.argsort(cell, kind="stable")
    sorted_cells = cell[order]
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    group_start = np.repeat(starts, np.diff(np.r_[starts, sorted_cells.size]))
    rank_sorted = np.arange(sorted_cells.size) - group_start
    rank = np.empty_like(rank_sorted)
    rank[order] = rank_sorted
    keep = rank < cfg.max_points_per_cell
    pts, cell, rank = pts[keep], cell[keep], rank[keep]

    cx = cfg.x_range[0] + (cell % cfg.w_bev + 0.5) * cell_w
    cy = cfg.y_range[0] + (cell // cfg.w_bev + 0.5) * cell_h
    feats = np.column_stack([pts, pts[:, 0] - cx, pts[:, 1] - cy])
    return feats, cell, rank


def segment_max_pool(x: Tensor, cell_ids: np.ndarray, slots: np.ndarray,
                     n_cells: int, cap: int) -> Tensor:
    """Per-cell max over point features, (N, C) -> (n_cells, C).

    Empty cells are exact zeros. Backward routes each cell/channel gradient
    to the contributing point with the lowest index (numpy argmax picks the
    first slot, and slots follow input order).
    """
    n, c = x.shape
    dense = np.full((n_cells, cap, c), -np.inf, dtype=x.dtype)
    dense[cell_ids, slots] = x.data
    arg = dense.argmax(axis=1)                      # (n_cells, C), first max wins
    pooled = np.take_along_axis(dense, arg[:, None, :], axis=1)[:, 0, :]
    occupied = np.zeros(n_cells, dtype=bool)
    occupied[cell_ids] = True
    pooled[~occupied] = 0.0
    out = Tensor(pooled)

    # map (cell, slot) back to point index for the backward scatter
    slot_to_point = np.full((n_cells, cap), -1, dtype=np.intp)
    slot_to_point[cell_ids, slots] = np.arange(n)

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            cells = np.flatnonzero(occupied)
            winners = slot_to_point[cells[:, None], arg[cells]]   # (n_occ, C)
            np.add.at(buf, (winners.ravel(), np.tile(np.arange(c), cells.size)), g[cells].ravel())
            accumulate_grad(x, buf)

    return record_op(out, [x], bwd)


def encode(pc: PointCloud, cfg: GridConfig, params: dict[str, Tensor]) -> Tensor:
    """Point cloud -> BEV image (C_BEV, H_BEV, W_BEV); empty input -> all zeros."""
    cfg.validate()
    n_cells = cfg.h_bev * cfg.w_bev
    feats, cells, slots = bin_points(pc, cfg)
    if feats.shape[0] == 0:
        return Tensor(np.zeros((cfg.c_bev, cfg.h_bev, cfg.w_bev),
                               dtype=params["w"].dtype))
    per_point = relu(affine(Tensor(feats, dtype=params["w"].dtype), params["w"], params["b"]))
    pooled = segment_max_pool(per_point, cells, slots, n_cells, cfg.max_points_per_cell)
    grid = reshape(pooled, (cfg.h_bev, cfg.w_bev, cfg.c_bev))
    return transpose(grid, (2, 0, 1))
