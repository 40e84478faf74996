"""Synthetic LiDAR lane scenes: point clouds, one-hot BEV labels, occlusion.

A scene is a pure function of (config, seed). Lanes share one quadratic
road shape per scene (curvature a, heading b) with per-lane lateral
offsets and a little heading jitter; occluders are axis-aligned rectangles
that delete points but never labels, mirroring datasets where occluded
lanes stay annotated.

Grid convention: rows index the forward axis (y), columns the lateral
axis (x). Row 0 is the nearest row.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError

DATASET_MAGIC = b"RWLS"
DATASET_VERSION = 1


def splitmix64(x: int) -> int:
    """Standard splitmix64 finalizer; used to derive independent sub-seeds."""
    z = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_subseed(seed: int, i: int) -> int:
    """Sub-seed for record i: splitmix64(seed XOR i)."""
    return splitmix64((int(seed) ^ int(i)) & 0xFFFFFFFFFFFFFFFF)


@dataclass
class SceneConfig:
    x_range: tuple[float, float] = (-8.0, 8.0)   # lateral meters (columns)
    y_range: tuple[float, float] = (0.0, 30.0)   # forward meters (rows)
    h_bev: int = 48
    w_bev: int = 32
    n_cls: int = 6
    n_lanes: int = 6                 # per-scene count drawn uniform{1..n_lanes}
    curvature: tuple[float, float] = (0.0, 0.004)  # |a| range, 1/m
    lane_density: float = 8.0        # lane points per meter of forward extent
    road_density: float = 2.0        # background points per square meter
    lane_intensity: tuple[float, float] = (0.85, 0.06)  # mean, std
    road_intensity: tuple[float, float] = (0.2, 0.08)
    n_occluders: int = 0             # per-scene count drawn uniform{0..n_occluders}
    occluder_size: tuple[float, float] = (1.5, 4.0)  # footprint side, meters
    seed: int = 0

    def validate(self):
        if not (1 <= self.n_lanes <= self.n_cls):
            raise ConfigError(f"n_lanes {self.n_lanes} must be in 1..n_cls={self.n_cls}")
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ConfigError("degenerate x_range/y_range")
        if self.lane_density <= 0:
            raise ConfigError("lane_density must be positive")
        if not (0 <= self.n_occluders <= 6):
            raise ConfigError("n_occluders must be in 0..6")
        if self.h_bev < 4 or self.w_bev < 4:
            raise ConfigError("grid must be at least 4x4")

    @property
    def cell_w(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.w_bev

    @property
    def cell_h(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.h_bev

    def row_centers(self) -> np.ndarray:
        return self.y_range[0] + (np.arange(self.h_bev) + 0.5) * self.cell_h


@dataclass
class PointCloud:
    """(N, 3+C) float32 array of x, y, z plus extra channels (intensity first)."""
    points: np.ndarray
    n_extra: int = 1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3 + self.n_extra)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class LaneLabels:
    existence: np.ndarray   # (n_cls, H, 2) uint8 one-hot, col 1 = exist
    location: np.ndarray    # (n_cls, H, W) uint8 one-hot, zero rows where absent
    occluded_lane_count: int = 0

    def validate(self):
        n_cls, h, _ = self.existence.shape
        assert self.location.shape[:2] == (n_cls, h)
        assert np.all(self.existence.sum(axis=2) == 1), "existence rows must be one-hot"
        assert np.array_equal(self.location.sum(axis=2), self.existence[:, :, 1]), \
            "location row sums must equal the exist flags"


@dataclass
class LaneGeometry:
    """Analytic per-scene ground truth used to rasterize labels and place points."""
    coeff_a: np.ndarray     # (n,) shared curvature with per-lane copy
    coeff_b: np.ndarray     # (n,) heading
    coeff_c: np.ndarray     # (n,) lateral offsets, increasing
    occluders: list[tuple[float, float, float, float]] = field(default_factory=list)  # x0,x1,y0,y1

    def lateral(self, lane: int, y: np.ndarray) -> np.ndarray:
        return self.coeff_a[lane] * y * y + self.coeff_b[lane] * y + self.coeff_c[lane]

    @property
    def n_lanes(self) -> int:
        return self.coeff_c.shape[0]


def sample_lane_geometry(cfg: SceneConfig, rng: np.random.Generator) -> LaneGeometry:
    """Draw lane curves that stay in-bounds and keep >= 2 cells of separation.

    One shared (a, b) road shape; headings scale with the curvature range so a
    zero-curvature config yields exactly vertical lanes. Retries with fresh
    draws up to 100 times before raising ConfigError.
    """
    y = cfg.row_centers()
    min_sep = 2.0 * cfg.cell_w
    margin = 1.0 * cfg.cell_w
    c_max = cfg.curvature[1]
    n = int(rng.integers(1, cfg.n_lanes + 1))  # drawn once so retries keep the lane count
    for _ in range(100):
        a = rng.uniform(cfg.curvature[0], c_max) * rng.choice([-1.0, 1.0])
        b = rng.uniform(-10.0 * c_max, 10.0 * c_max)
        coeff_a = np.full(n, a)
        coeff_b = b + rng.uniform(-2.5 * c_max, 2.5 * c_max, size=n)
        # usable offset interval once the shared deflection is accounted for
        defl = a * y * y + b * y
        lo = cfg.x_range[0] + margin - defl.min()
        hi = cfg.x_range[1] - margin - defl.max()
        jitter_headroom = 5.0 * c_max * (cfg.y_range[1] - cfg.y_range[0])
        gap = min_sep + jitter_headroom
        span = (hi - lo) - (n - 1) * gap
        if span <= 0:
            continue
        u = np.sort(rng.uniform(0.0, span, size=n))
        coeff_c = lo + u + np.arange(n) * gap
        geom = LaneGeometry(coeff_a, coeff_b, coeff_c)
        cols = np.stack([geom.lateral(i, y) for i in range(n)])
        in_bounds = np.all(cols > cfg.x_range[0]) and np.all(cols < cfg.x_range[1])
        separated = n == 1 or np.all(np.diff(cols, axis=0) >= min_sep)
        if in_bounds and separated:
            return geom
    raise ConfigError("could not place separable in-bounds lanes after 100 attempts")


def rasterize_labels(geom: LaneGeometry, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """One-hot existence (n_cls, H, 2) and location (n_cls, H, W) from curves."""
    existence = np.zeros((cfg.n_cls, cfg.h_bev, 2), dtype=np.uint8)
    existence[:, :, 0] = 1
    location = np.zeros((cfg.n_cls, cfg.h_bev, cfg.w_bev), dtype=np.uint8)
    y = cfg.row_centers()
    for lane in range(geom.n_lanes):
        cols = np.floor((geom.lateral(lane, y) - cfg.x_range[0]) / cfg.cell_w).astype(int)
        cols = np.clip(cols, 0, cfg.w_bev - 1)
        existence[lane, :, 0] = 0
        existence[lane, :, 1] = 1
        location[lane, np.arange(cfg.h_bev), cols] = 1
    return existence, location


def sample_points(geom: LaneGeometry, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Lane points hugging each curve plus low-intensity road clutter, (N, 4)."""
    y0, y1 = cfg.y_range
    chunks = []
    n_lane_pts = max(1, int(round(cfg.lane_density * (y1 - y0))))
    max_jitter = 0.45 * cfg.cell_w  # keeps every lane point within 1 cell of its label column
    for lane in range(geom.n_lanes):
        ys = rng.uniform(y0, y1, size=n_lane_pts)
        jitter = np.clip(rng.normal(0.0, 0.25 * cfg.cell_w, size=n_lane_pts), -max_jitter, max_jitter)
        xs = geom.lateral(lane, ys) + jitter
        zs = rng.normal(0.0, 0.02, size=n_lane_pts)
        inten = np.clip(rng.normal(*cfg.lane_intensity, size=n_lane_pts), 0.0, 1.0)
        chunks.append(np.column_stack([xs, ys, zs, inten]))
    area = (cfg.x_range[1] - cfg.x_range[0]) * (y1 - y0)
    n_road = int(round(cfg.road_density * area))
    if n_road > 0:
        xs = rng.uniform(cfg.x_range[0], cfg.x_range[1], size=n_road)
        ys = rng.uniform(y0, y1, size=n_road)
        zs = rng.normal(0.0, 0.02, size=n_road)
        inten = np.clip(rng.normal(*cfg.road_intensity, size=n_road), 0.0, 1.0)
        chunks.append(np.column_stack([xs, ys, zs, inten]))
    return np.concatenate(chunks, axis=0).astype(np.float32)


def place_occluders(geom: LaneGeometry, cfg: SceneConfig, rng: np.random.Generator
                    ) -> list[tuple[float, float, float, float]]:
    """Rectangles centered on a random lane so each footprint straddles one."""
    count = int(rng.integers(0, cfg.n_occluders + 1)) if cfg.n_occluders > 0 else 0
    rects = []
    for _ in range(count):
        lane = int(rng.integers(0, geom.n_lanes))
        yc = rng.uniform(cfg.y_range[0] + 1.0, cfg.y_range[1] - 1.0)
        xc = float(geom.lateral(lane, np.array([yc]))[0])
        sx = rng.uniform(*cfg.occluder_size)
        sy = rng.uniform(*cfg.occluder_size)
        rects.append((xc - sx / 2, xc + sx / 2, yc - sy / 2, yc + sy / 2))
    return rects


def apply_occluders(points: np.ndarray, rects) -> np.ndarray:
    """Drop every point inside any footprint."""
    if not rects or points.shape[0] == 0:
        return points
    keep = np.ones(points.shape[0], dtype=bool)
    for x0, x1, y0, y1 in rects:
        inside = (points[:, 0] >= x0) & (points[:, 0] <= x1) & \
                 (points[:, 1] >= y0) & (points[:, 1] <= y1)
        keep &= ~inside
    return points[keep]


def count_occluded_lanes(geom: LaneGeometry, cfg: SceneConfig) -> int:
    """Lanes whose curve crosses at least one occluder footprint."""
    occluded = 0
    y = cfg.row_centers()
    for lane in range(geom.n_lanes):
        xs = geom.lateral(lane, y)
        hit = False
        for x0, x1, y0, y1 in geom.occluders:
            rows = (y >= y0) & (y <= y1)
            if np.any(rows & (xs >= x0) & (xs <= x1)):
                hit = True
                break
        if hit:
            occluded += 1
    return occluded


def generate_scene(cfg: SceneConfig, seed: int | None = None) -> tuple[PointCloud, LaneLabels]:
    """One labeled scene; identical (cfg, seed) gives bit-identical output."""
    cfg.validate()
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng(derive_subseed(seed, 0))
    geom = sample_lane_geometry(cfg, rng)
    existence, location = rasterize_labels(geom, cfg)
    points = sample_points(geom, cfg, rng)
    geom.occluders = place_occluders(geom, cfg, rng)
    points = apply_occluders(points, geom.occluders)
    occ = count_occluded_lanes(geom, cfg)
    return PointCloud(points), LaneLabels(existence, location, occ)


# ---------------------------------------------------------------------------
# Dataset file format
#
#   magic "RWLS" | version u32 | scene count u32
#   | n_cls u16 | h_bev u16 | w_bev u16 | n_extra u16
#   per scene:
#     point count u32 | points f32 x (3+C) little-endian
#     per class: existence bitmap, H_BEV bits (LSB-first within bytes),
#                then u16 column index per existing row in row order
#     occluded_lane_count u8
# ---------------------------------------------------------------------------


def _pack_bits(flags: np.ndarray) -> bytes:
    return np.packbits(flags.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(buf: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:n]


def write_scenes(path, scenes: list[tuple[PointCloud, LaneLabels]], cfg: SceneConfig):
    try:
        out = io.BytesIO()
        out.write(DATASET_MAGIC)
        out.write(struct.pack("<II", DATASET_VERSION, len(scenes)))
        out.write(struct.pack("<HHHH", cfg.n_cls, cfg.h_bev, cfg.w_bev, 1))
        for pc, labels in scenes:
            pts = np.ascontiguousarray(pc.points, dtype="<f4")
            out.write(struct.pack("<I", pts.shape[0]))
            out.write(pts.tobytes())
            for c in range(cfg.n_cls):
                flags = labels.existence[c, :, 1]
                out.write(_pack_bits(flags))
                rows = np.flatnonzero(flags)
                cols = labels.location[c, rows].argmax(axis=1).astype("<u2")
                out.write(cols.tobytes())
            out.write(struct.pack("<B", labels.occluded_lane_count))
        with open(path, "wb") as fh:
            fh.write(out.getvalue())
    except OSError as e:
        raise OSError(f"failed writing dataset to {path}: {e}") from e


def read_scenes(path) -> tuple[list[tuple[PointCloud, LaneLabels]], dict]:
    """Load a dataset file; returns (scenes, header) with header grid dims."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise OSError(f"failed reading dataset from {path}: {e}") from e
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a scene dataset (bad magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    n_cls, h_bev, w_bev, n_extra = struct.unpack_from("<HHHH", raw, 12)
    off = 20
    bitmap_bytes = (h_bev + 7) // 8
    scenes = []
    for _ in range(count):
        (n_pts,) = struct.unpack_from("<I", raw, off)
        off += 4
        pts = np.frombuffer(raw, dtype="<f4", count=n_pts * (3 + n_extra), offset=off)
        off += pts.nbytes
        pc = PointCloud(pts.reshape(n_pts, 3 + n_extra).copy(), n_extra=n_extra)
        existence = np.zeros((n_cls, h_bev, 2), dtype=np.uint8)
        location = np.zeros((n_cls, h_bev, w_bev), dtype=np.uint8)
        for c in range(n_cls):
            flags = _unpack_bits(raw[off:off + bitmap_bytes], h_bev)
            off += bitmap_bytes
            rows = np.flatnonzero(flags)
            cols = np.frombuffer(raw, dtype="<u2", count=rows.size, offset=off)
            off += cols.nbytes
            existence[c, :, 0] = 1 - flags
            existence[c, :, 1] = flags
            location[c, rows, cols] = 1
        (occ,) = struct.unpack_from("<B", raw, off)
        off += 1
        scenes.append((pc, LaneLabels(existence, location, int(occ))))
    header = {"n_cls": n_cls, "h_bev": h_bev, "w_bev": w_bev, "n_extra": n_extra}
    return scenes, header


def make_dataset(cfg: SceneConfig, n_scenes: int, seed: int, path) -> list[tuple[PointCloud, LaneLabels]]:
    """Generate n_scenes scenes (sub-seed i = splitmix64(seed XOR i)) and write them."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    scenes = [generate_scene(cfg, derive_subseed(seed, i)) for i in range(n_scenes)]
    write_scenes(path, scenes, cfg)
    return scenes


def render_bev_text(labels: LaneLabels, proposals=None) -> str:
    """ASCII grid: digits = label classes, letters = proposal classes, * = both."""
    n_cls, h, w = labels.location.shape
    grid = [["." for _ in range(w)] for _ in range(h)]
    for c in range(n_cls):
        for row in range(h):
            if labels.existence[c, row, 1]:
                col = int(labels.location[c, row].argmax())
                grid[row][col] = str(c)
    if proposals is not None:
        for c in range(proposals.exists.shape[0]):
            for row in range(proposals.exists.shape[1]):
                if proposals.exists[c, row]:
                    col = int(proposals.column[c, row])
                    grid[row][col] = "*" if grid[row][col] != "." else "abcdef"[c % 6]
    # far rows on top
    return "\n".join("".join(r) for r in reversed(grid))
