"""Planar rigid transforms, regions of interest, and reference-point arithmetic.

Everything downstream of the sensors works on the BEV plane, so transforms
here are strictly 2D (rotation + translation). The z axis only ever appears
as a filter range inside :class:`Roi`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

ORTHONORMAL_TOL = 1e-9
DEFAULT_OFFSET_BOUND = 5.0  # meters; sanity cap on calibration corrections


class GeometryError(ValueError):
    """Invalid geometric construction (bad rotation, degenerate ROI, ...)."""


def _as_vec2(p) -> np.ndarray:
    a = np.asarray(p, dtype=float)
    if a.shape != (2,):
        raise GeometryError(f"expected a 2-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class RigidTransform2D:
    """Proper rigid motion of the plane: ``p -> rotation @ p + translation``."""

    rotation: np.ndarray  # (2, 2), orthonormal, det +1
    translation: np.ndarray  # (2,), meters

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        trans = np.asarray(self.translation, dtype=float)
        if rot.shape != (2, 2):
            raise GeometryError(f"rotation must be 2x2, got {rot.shape}")
        if trans.shape != (2,):
            raise GeometryError(f"translation must be a 2-vector, got {trans.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise GeometryError("transform entries must be finite")
        if not np.allclose(rot.T @ rot, np.eye(2), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise GeometryError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("rotation must have determinant +1 (no reflections)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform2D":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0)) -> "RigidTransform2D":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s], [s, c]]), np.asarray(translation, dtype=float))

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (2,) point or an (N, 2) batch."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform2D":
        rot_inv = self.rotation.T.copy()
        return RigidTransform2D(rot_inv, -(rot_inv @ self.translation))

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """Return the transform applying ``other`` first, then ``self``."""
        return RigidTransform2D(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform2D") -> "RigidTransform2D":
        return self.compose(other)


@dataclass(frozen=True)
class Roi:
    """Axis-aligned working volume, meters. x/y bound the BEV plane, z the slab."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for lo, hi, axis in (
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
            (self.z_min, self.z_max, "z"),
        ):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise GeometryError(f"ROI {axis} range [{lo}, {hi}] is invalid")

    @property
    def x_span(self) -> float:
        return self.x_max - self.x_min

    @property
    def y_span(self) -> float:
        return self.y_max - self.y_min

    def contains_xy(self, points: np.ndarray) -> np.ndarray:
        """Closed-interval membership test for (..., 2) points on the BEV plane."""
        pts = np.asarray(points, dtype=float)
        return (
            (pts[..., 0] >= self.x_min)
            & (pts[..., 0] <= self.x_max)
            & (pts[..., 1] >= self.y_min)
            & (pts[..., 1] <= self.y_max)
        )

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max,
            "y_min": self.y_min, "y_max": self.y_max,
            "z_min": self.z_min, "z_max": self.z_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Roi":
        return cls(**{k: float(d[k]) for k in
                      ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")})


class OffsetGranularity(str, Enum):
    GLOBAL = "global"
    PER_QUERY_CELL = "per_query_cell"


@dataclass(frozen=True)
class CalibrationOffsets:
    """Learnable translation corrections applied on each side's reference points.

    One 2-vector per side by default (a single rigid miscalibration is the
    physical model); per-query-cell granularity is accepted for forward
    compatibility but the fitting path only produces global offsets.
    """

    d_veh: np.ndarray  # (2,), meters
    d_inf: np.ndarray  # (2,), meters
    granularity: OffsetGranularity = OffsetGranularity.GLOBAL
    bound: float = DEFAULT_OFFSET_BOUND

    def __post_init__(self):
        d_veh = np.asarray(self.d_veh, dtype=float)
        d_inf = np.asarray(self.d_inf, dtype=float)
        if self.granularity is OffsetGranularity.GLOBAL:
            if d_veh.shape != (2,) or d_inf.shape != (2,):
                raise GeometryError("global offsets must be 2-vectors")
        else:
            if d_veh.ndim != 2 or d_veh.shape[-1] != 2 or d_inf.shape != d_veh.shape:
                raise GeometryError("per-cell offsets must be (n_cells, 2) on both sides")
        for name, arr in (("d_veh", d_veh), ("d_inf", d_inf)):
            if not np.all(np.isfinite(arr)):
                raise GeometryError(f"{name} must be finite")
            if np.any(np.abs(arr) > self.bound):
                raise GeometryError(
                    f"{name} exceeds the configured bound of {self.bound} m")
        d_veh.setflags(write=False)
        d_inf.setflags(write=False)
        object.__setattr__(self, "d_veh", d_veh)
        object.__setattr__(self, "d_inf", d_inf)

    @classmethod
    def zero(cls) -> "CalibrationOffsets":
        return cls(np.zeros(2), np.zeros(2))

    def with_inf(self, d_inf) -> "CalibrationOffsets":
        return replace(self, d_inf=np.asarray(d_inf, dtype=float))

    def with_veh(self, d_veh) -> "CalibrationOffsets":
        return replace(self, d_veh=np.asarray(d_veh, dtype=float))


@dataclass(frozen=True)
class ReferencePoint:
    """One BEV location projected into both sides' feature frames.

    ``inf_in_bounds`` is the per-point mask consumed by the fusion stage: the
    infrastructure branch contributes if and only if the normalized
    infrastructure coordinate lies inside the closed unit square.
    """

    bev_coord: np.ndarray       # (2,), ego BEV frame, meters
    veh_coord: np.ndarray       # (2,), vehicle feature frame, meters
    inf_coord: np.ndarray       # (2,), infrastructure feature frame, meters
    veh_normalized: np.ndarray  # (2,), unit-square coordinates
    inf_normalized: np.ndarray  # (2,), unit-square coordinates
    inf_in_bounds: bool


def apply_rigid_transform(t: RigidTransform2D, p) -> np.ndarray:
    """Rotate then translate a single point."""
    return t.apply(_as_vec2(p))


def compensate_reference_point(ref_bev, t: RigidTransform2D, offset) -> np.ndarray:
    """Project a BEV point into a side's frame and add its calibration correction.

    The correction is added after the rigid projection, i.e. it is expressed
    in the target (feature) frame.
    """
    return t.apply(_as_vec2(ref_bev)) + _as_vec2(offset)


def normalize_point(p, roi: Roi) -> tuple[np.ndarray, bool]:
    """Scale a point into ROI-relative unit coordinates.

    Returns the normalized coordinate and whether it lies inside the closed
    unit square (boundary values count as in bounds).
    """
    q = _as_vec2(p)
    norm = np.array([
        (q[0] - roi.x_min) / roi.x_span,
        (q[1] - roi.y_min) / roi.y_span,
    ])
    in_bounds = bool(np.all(norm >= 0.0) and np.all(norm <= 1.0))
    return norm, in_bounds


def denormalize_point(p01, roi: Roi) -> np.ndarray:
    """Inverse of :func:`normalize_point` on the unit square."""
    q = _as_vec2(p01)
    return np.array([
        roi.x_min + q[0] * roi.x_span,
        roi.y_min + q[1] * roi.y_span,
    ])


def build_reference_point(
    ref_bev,
    t_bev2veh: RigidTransform2D,
    t_bev2inf: RigidTransform2D,
    offsets: CalibrationOffsets,
    roi_veh: Roi,
    roi_inf: Roi,
) -> ReferencePoint:
    """Run one BEV point through both sides' compensated projections."""
    ref_bev = _as_vec2(ref_bev)
    veh = compensate_reference_point(ref_bev, t_bev2veh, offsets.d_veh)
    inf = compensate_reference_point(ref_bev, t_bev2inf, offsets.d_inf)
    veh_n, _ = normalize_point(veh, roi_veh)
    inf_n, inf_ok = normalize_point(inf, roi_inf)
    return ReferencePoint(
        bev_coord=ref_bev,
        veh_coord=veh,
        inf_coord=inf,
        veh_normalized=veh_n,
        inf_normalized=inf_n,
        inf_in_bounds=inf_ok,
    )


@dataclass(frozen=True)
class ReferenceBatch:
    """Array-of-struct companion to :class:`ReferencePoint` for whole grids.

    Shapes: ``veh_normalized`` and ``inf_normalized`` are (N, R, 2) for N
    queries with R reference points each; ``inf_in_bounds`` is (N, R) bool.
    """

    bev_coords: np.ndarray
    veh_normalized: np.ndarray
    inf_normalized: np.ndarray
    inf_in_bounds: np.ndarray

    @property
    def n_queries(self) -> int:
        return self.veh_normalized.shape[0]

    @property
    def n_refs(self) -> int:
        return self.veh_normalized.shape[1]


def build_reference_batch(
    bev_points: np.ndarray,
    t_bev2veh: RigidTransform2D,
    t_bev2inf: RigidTransform2D,
    offsets: CalibrationOffsets,
    roi_veh: Roi,
    roi_inf: Roi,
) -> ReferenceBatch:
    """Vectorized projection of an (N, R, 2) block of BEV reference points."""
    pts = np.asarray(bev_points, dtype=float)
    if pts.ndim != 3 or pts.shape[-1] != 2:
        raise GeometryError(f"expected (N, R, 2) reference points, got {pts.shape}")
    veh = t_bev2veh.apply(pts) + offsets.d_veh
    inf = t_bev2inf.apply(pts) + offsets.d_inf
    veh_n = np.stack([
        (veh[..., 0] - roi_veh.x_min) / roi_veh.x_span,
        (veh[..., 1] - roi_veh.y_min) / roi_veh.y_span,
    ], axis=-1)
    inf_n = np.stack([
        (inf[..., 0] - roi_inf.x_min) / roi_inf.x_span,
        (inf[..., 1] - roi_inf.y_min) / roi_inf.y_span,
    ], axis=-1)
    in_bounds = np.all((inf_n >= 0.0) & (inf_n <= 1.0), axis=-1)
    return ReferenceBatch(
        bev_coords=pts,
        veh_normalized=veh_n,
        inf_normalized=inf_n,
        inf_in_bounds=in_bounds,
    )
