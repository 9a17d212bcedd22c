"""Point clouds to BEV pseudo-images: pillar voxelization, encoding, pyramid.

The encoder is deliberately training-free: a seeded (or hand-built) linear
layer with ReLU and per-pillar max pooling, scattered onto the grid, then
downsampled into a multi-level pyramid by 2x2 average pooling. Heavy learned
backbones are out of scope; the downstream attention math only needs a valid
multi-level feature pyramid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Roi

AUGMENTED_DIM = 9  # x, y, z, offsets from pillar centroid (3), from cell center (2), range

DUMP_MAGIC = b"BEVF"
DUMP_HEADER_BYTES = 32


class PillarError(ValueError):
    pass


@dataclass(frozen=True)
class PillarGrid:
    """Sparse pillar grid: occupied cells only, each holding its raw points."""

    roi: Roi
    voxel_size: np.ndarray  # (3,), meters
    cells: dict  # (ix, iy) -> (n, 3) float array
    dims: tuple[int, int]

    @property
    def n_points(self) -> int:
        return sum(len(v) for v in self.cells.values())

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        vx, vy = self.voxel_size[0], self.voxel_size[1]
        return np.array([
            self.roi.x_min + (ix + 0.5) * vx,
            self.roi.y_min + (iy + 0.5) * vy,
        ])


@dataclass(frozen=True)
class BevFeatureMap:
    """Dense (nx, ny, C) feature grid over a BEV ROI."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise PillarError(f"feature map must be (nx, ny, C), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise PillarError("feature map contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MultiScaleFeatures:
    """Ordered feature pyramid; level l has dims (nx / 2**l, ny / 2**l)."""

    levels: list[BevFeatureMap]

    def __post_init__(self):
        if not self.levels:
            raise PillarError("pyramid needs at least one level")
        c0 = self.levels[0].channels
        nx0, ny0 = self.levels[0].dims
        for l, lvl in enumerate(self.levels):
            if lvl.channels != c0:
                raise PillarError("channel count must match across levels")
            if lvl.dims != (nx0 >> l, ny0 >> l):
                raise PillarError(
                    f"level {l} dims {lvl.dims} are not base/2^{l}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].channels


@dataclass(frozen=True)
class EncoderWeights:
    """Training-free encoder parameters: pillar linear layer + pyramid smoothing."""

    pillar_linear: np.ndarray  # (C, AUGMENTED_DIM)
    bias: np.ndarray  # (C,)
    smoothing: str | None = None  # None or "box3" (wrap-around 3x3 box filter)
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.pillar_linear, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if w.ndim != 2 or w.shape[1] != AUGMENTED_DIM:
            raise PillarError(
                f"pillar_linear must be (C, {AUGMENTED_DIM}), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise PillarError("bias shape must match output channels")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise PillarError("encoder weights must be finite")
        if self.smoothing not in (None, "box3"):
            raise PillarError(f"unknown smoothing kernel {self.smoothing!r}")
        object.__setattr__(self, "pillar_linear", w)
        object.__setattr__(self, "bias", b)

    @property
    def channels(self) -> int:
        return self.pillar_linear.shape[0]

    @classmethod
    def seeded(cls, channels: int, seed: int, smoothing: str | None = None) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / np.sqrt(AUGMENTED_DIM), size=(channels, AUGMENTED_DIM))
        b = rng.normal(0.0, 0.1, size=channels)
        return cls(w, b, smoothing=smoothing, seed=seed)

    @classmethod
    def occupancy_probe(cls, channels: int, smoothing: str | None = None) -> "EncoderWeights":
        """Hand weights whose channel 0 is 1 on any occupied pillar, 0 elsewhere."""
        w = np.zeros((channels, AUGMENTED_DIM))
        b = np.zeros(channels)
        b[0] = 1.0
        return cls(w, b, smoothing=smoothing)


def voxelize(points: np.ndarray, roi: Roi, voxel_size) -> PillarGrid:
    """Bin points into vertical pillars over the ROI.

    Points with x/y/z outside the ROI are dropped (upper bounds exclusive so
    every kept point lands in a valid cell index). The z extent collapses
    into a single slab: pillars have no vertical subdivision.
    """
    vs = np.asarray(voxel_size, dtype=float)
    if vs.shape != (3,) or np.any(vs <= 0):
        raise PillarError(f"voxel_size must be 3 positive extents, got {voxel_size}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nx = int(round(roi.x_span / vs[0]))
    ny = int(round(roi.y_span / vs[1]))

    keep = (
        (pts[:, 0] >= roi.x_min) & (pts[:, 0] < roi.x_max)
        & (pts[:, 1] >= roi.y_min) & (pts[:, 1] < roi.y_max)
        & (pts[:, 2] >= roi.z_min) & (pts[:, 2] < roi.z_max)
    )
    pts = pts[keep]
    ix = np.floor((pts[:, 0] - roi.x_min) / vs[0]).astype(np.int64)
    iy = np.floor((pts[:, 1] - roi.y_min) / vs[1]).astype(np.int64)

    cells: dict[tuple[int, int], np.ndarray] = {}
    if len(pts):
        flat = ix * ny + iy
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        pts_sorted = pts[order]
        starts = np.flatnonzero(np.r_[True, flat_sorted[1:] != flat_sorted[:-1]])
        bounds = np.r_[starts, len(flat_sorted)]
        for s, e in zip(bounds[:-1], bounds[1:]):
            key = (int(flat_sorted[s] // ny), int(flat_sorted[s] % ny))
            cells[key] = pts_sorted[s:e]
    return PillarGrid(roi=roi, voxel_size=vs, cells=cells, dims=(nx, ny))


def augment_points(points: np.ndarray, cell_center: np.ndarray) -> np.ndarray:
    """Expand raw (n, 3) pillar points into the 9-feature encoder input."""
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    out = np.empty((len(pts), AUGMENTED_DIM))
    out[:, 0:3] = pts
    out[:, 3:6] = pts - centroid
    out[:, 6] = pts[:, 0] - cell_center[0]
    out[:, 7] = pts[:, 1] - cell_center[1]
    out[:, 8] = np.linalg.norm(pts, axis=1)
    return out


def pillar_encode(grid: PillarGrid, weights: EncoderWeights) -> BevFeatureMap:
    """Linear + ReLU per augmented point, max-pool per pillar, scatter to grid.

    Empty pillars produce the zero vector, which is consistent with the
    max-pool output being non-negative after ReLU.
    """
    nx, ny = grid.dims
    c = weights.channels
    out = np.zeros((nx, ny, c))
    if not grid.cells:
        return BevFeatureMap(out)

    keys = list(grid.cells.keys())
    feats_all = []
    flat_idx = []
    for (ix, iy) in keys:
        pts = grid.cells[(ix, iy)]
        aug = augment_points(pts, grid.cell_center(ix, iy))
        feats = np.maximum(aug @ weights.pillar_linear.T + weights.bias, 0.0)
        feats_all.append(feats)
        flat_idx.append(np.full(len(feats), ix * ny + iy, dtype=np.int64))
    feats_all = np.concatenate(feats_all, axis=0)
    flat_idx = np.concatenate(flat_idx)
    flat_out = out.reshape(nx * ny, c)
    np.maximum.at(flat_out, flat_idx, feats_all)
    return BevFeatureMap(out)


def _box3_wrap(data: np.ndarray) -> np.ndarray:
    """3x3 box filter with wrap-around edges; preserves the grid mean exactly."""
    acc = np.zeros_like(data)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            acc += np.roll(np.roll(data, dx, axis=0), dy, axis=1)
    return acc / 9.0


def _avg_pool2(data: np.ndarray) -> np.ndarray:
    nx, ny, c = data.shape
    return data.reshape(nx // 2, 2, ny // 2, 2, c).mean(axis=(1, 3))


def build_pyramid(base: BevFeatureMap, weights: EncoderWeights, num_levels: int) -> MultiScaleFeatures:
    """Stack of average-pooled copies of the base map, optionally smoothed.

    Each level halves both spatial dims, so the base must divide evenly.
    """
    if num_levels < 1:
        raise PillarError("num_levels must be >= 1")
    nx, ny = base.dims
    factor = 1 << (num_levels - 1)
    if nx % factor or ny % factor:
        raise PillarError(
            f"base dims {base.dims} not divisible by 2^{num_levels - 1}")

    def smooth(d):
        return _box3_wrap(d) if weights.smoothing == "box3" else d

    levels = [BevFeatureMap(smooth(base.data))]
    for _ in range(num_levels - 1):
        levels.append(BevFeatureMap(smooth(_avg_pool2(levels[-1].data))))
    return MultiScaleFeatures(levels)


def dump_feature_map(fmap: BevFeatureMap, level: int, path: str) -> None:
    """Write one level as little-endian float32 row-major with a 32-byte header."""
    nx, ny = fmap.dims
    header = struct.pack("<4sIIII", DUMP_MAGIC, nx, ny, fmap.channels, level)
    header = header.ljust(DUMP_HEADER_BYTES, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_feature_map(path: str) -> tuple[BevFeatureMap, int]:
    with open(path, "rb") as fh:
        header = fh.read(DUMP_HEADER_BYTES)
        magic, nx, ny, c, level = struct.unpack("<4sIIII", header[:20])
        if magic != DUMP_MAGIC:
            raise PillarError("not a feature-map dump (bad magic)")
        data = np.frombuffer(fh.read(nx * ny * c * 4), dtype="<f4")
    return BevFeatureMap(data.reshape(nx, ny, c).astype(np.float32)), level
