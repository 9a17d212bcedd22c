"""Masked two-view BEV fusion built on multi-scale deformable attention.

All kernels are plain numpy with hand-derived gradients for the pieces the
calibration fit differentiates through (bilinear sampling locations). Loop
nesting and reduction order are fixed, so repeated runs are bit-identical.

Sampling convention: a normalized point p in [0,1]^2 maps onto a feature map
with dims (nx, ny) at continuous pixel coordinates (p_x*(nx-1), p_y*(ny-1)),
i.e. 0 and 1 land on the first/last cell centers. Locations outside the map
fade to zero (zero-padding); an optional clamp mode pins them to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CalibrationOffsets,
    ReferenceBatch,
    RigidTransform2D,
    Roi,
)
from .pillars import BevFeatureMap, MultiScaleFeatures


class FusionError(ValueError):
    pass


class EmptyOverlapError(FusionError):
    """The two ROIs share no sample points; nothing to align."""


class DivergenceError(FusionError):
    """The offset fit increased its loss too many steps in a row."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _gather_corners(data: np.ndarray, u: np.ndarray, v: np.ndarray, clamp: bool):
    """Fetch the 4 interpolation corners for continuous pixel coords.

    Returns (f00, f10, f01, f11, au, av) where a* are the fractional parts.
    Out-of-range corners read as zero unless clamp is set.
    """
    nx, ny = data.shape[0], data.shape[1]
    if clamp:
        u = np.clip(u, 0.0, nx - 1.0)
        v = np.clip(v, 0.0, ny - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    au = u - u0
    av = v - v0

    def fetch(ui, vi):
        ok = (ui >= 0) & (ui < nx) & (vi >= 0) & (vi < ny)
        vals = data[np.clip(ui, 0, nx - 1), np.clip(vi, 0, ny - 1)]
        return np.where(ok[..., None], vals, 0.0)

    return (
        fetch(u0, v0), fetch(u0 + 1, v0), fetch(u0, v0 + 1), fetch(u0 + 1, v0 + 1),
        au, av, u0, v0,
    )


def sample_at_pixels(fmap: BevFeatureMap, uv: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Bilinear interpolation at (..., 2) continuous pixel coordinates."""
    uv = np.asarray(uv, dtype=float)
    f00, f10, f01, f11, au, av, _, _ = _gather_corners(
        fmap.data, uv[..., 0], uv[..., 1], clamp)
    au = au[..., None]
    av = av[..., None]
    return (
        f00 * (1 - au) * (1 - av)
        + f10 * au * (1 - av)
        + f01 * (1 - au) * av
        + f11 * au * av
    )


def _pixel_scale(fmap: BevFeatureMap) -> np.ndarray:
    nx, ny = fmap.dims
    return np.array([nx - 1.0, ny - 1.0])


def rescale_to_pixels(fmap: BevFeatureMap, p: np.ndarray) -> np.ndarray:
    """Map normalized unit-square coordinates onto this map's pixel lattice."""
    return np.asarray(p, dtype=float) * _pixel_scale(fmap)


def bilinear_sample(fmap: BevFeatureMap, p, clamp: bool = False) -> np.ndarray:
    """Sample a feature map at one normalized point; zero outside by default."""
    p = np.asarray(p, dtype=float)
    if p.shape != (2,):
        raise FusionError(f"expected a single normalized 2-vector, got {p.shape}")
    return sample_at_pixels(fmap, rescale_to_pixels(fmap, p), clamp=clamp)


def sample_pixels_with_grad(fmap: BevFeatureMap, uv: np.ndarray, clamp: bool = False):
    """Bilinear values plus their spatial derivative w.r.t. pixel coords.

    Returns (values (..., C), d/du (..., C), d/dv (..., C)). The derivative is
    the one-sided slope inside the containing cell; callers checking against
    finite differences should stay away from the cell-boundary kinks.
    """
    uv = np.asarray(uv, dtype=float)
    f00, f10, f01, f11, au, av, _, _ = _gather_corners(
        fmap.data, uv[..., 0], uv[..., 1], clamp)
    au_ = au[..., None]
    av_ = av[..., None]
    val = (f00 * (1 - au_) * (1 - av_) + f10 * au_ * (1 - av_)
           + f01 * (1 - au_) * av_ + f11 * au_ * av_)
    d_du = (f10 - f00) * (1 - av_) + (f11 - f01) * av_
    d_dv = (f01 - f00) * (1 - au_) + (f11 - f10) * au_
    return val, d_du, d_dv


def bilinear_sample_grad(fmap: BevFeatureMap, p, clamp: bool = False):
    """Value and Jacobian (C, 2) of :func:`bilinear_sample` w.r.t. p."""
    p = np.asarray(p, dtype=float)
    uv = rescale_to_pixels(fmap, p)
    val, d_du, d_dv = sample_pixels_with_grad(fmap, uv, clamp=clamp)
    scale = _pixel_scale(fmap)
    jac = np.stack([d_du * scale[0], d_dv * scale[1]], axis=-1)
    return val, jac


def scatter_pixel_grad(grad_map: np.ndarray, uv: np.ndarray, cotangent: np.ndarray,
                       clamp: bool = False) -> None:
    """Accumulate d(sample)/d(feature map) contributions into ``grad_map``."""
    uv = np.asarray(uv, dtype=float)
    nx, ny = grad_map.shape[0], grad_map.shape[1]
    u = uv[..., 0].ravel()
    v = uv[..., 1].ravel()
    if clamp:
        u = np.clip(u, 0.0, nx - 1.0)
        v = np.clip(v, 0.0, ny - 1.0)
    cot = cotangent.reshape(-1, grad_map.shape[2])
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    au = (u - u0)[:, None]
    av = (v - v0)[:, None]
    for di, dj, w in ((0, 0, (1 - au) * (1 - av)), (1, 0, au * (1 - av)),
                      (0, 1, (1 - au) * av), (1, 1, au * av)):
        ui = u0 + di
        vi = v0 + dj
        ok = (ui >= 0) & (ui < nx) & (vi >= 0) & (vi < ny)
        if np.any(ok):
            np.add.at(grad_map, (ui[ok], vi[ok]), (w * cot)[ok])


# ---------------------------------------------------------------------------
# multi-scale deformable attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeformAttnParams:
    """Weights of one deformable-attention block.

    ``value_proj[m]`` maps sampled C-vectors into the head subspace (C/M) and
    ``output_proj[m]`` maps head outputs back to C. ``offset_net`` and
    ``weight_net`` are single linear maps from the query, producing per
    (head, level, point) pixel offsets and attention logits; logits are
    softmax-normalized jointly over (level, point) within each head.
    """

    num_heads: int
    num_levels: int
    num_points: int
    output_proj: np.ndarray   # (M, C, C//M)
    value_proj: np.ndarray    # (M, C//M, C)
    offset_weight: np.ndarray  # (M*L*K*2, C)
    offset_bias: np.ndarray    # (M*L*K*2,)
    attn_weight: np.ndarray    # (M*L*K, C)
    attn_bias: np.ndarray      # (M*L*K,)
    clamp_sampling: bool = False

    def __post_init__(self):
        m, l, k = self.num_heads, self.num_levels, self.num_points
        c = self.output_proj.shape[1]
        if c % m:
            raise FusionError(f"channels {c} not divisible by {m} heads")
        if self.output_proj.shape != (m, c, c // m):
            raise FusionError("output_proj shape mismatch")
        if self.value_proj.shape != (m, c // m, c):
            raise FusionError("value_proj shape mismatch")
        if self.offset_weight.shape != (m * l * k * 2, c):
            raise FusionError("offset_net shape mismatch")
        if self.offset_bias.shape != (m * l * k * 2,):
            raise FusionError("offset_net bias shape mismatch")
        if self.attn_weight.shape != (m * l * k, c):
            raise FusionError("weight_net shape mismatch")
        if self.attn_bias.shape != (m * l * k,):
            raise FusionError("weight_net bias shape mismatch")

    @property
    def channels(self) -> int:
        return self.output_proj.shape[1]

    @classmethod
    def seeded(cls, channels: int, num_heads: int, num_levels: int, num_points: int,
               seed: int, offset_scale: float = 2.0,
               clamp_sampling: bool = False) -> "DeformAttnParams":
        """Random small-magnitude weights; offsets start spread within a few pixels."""
        rng = np.random.default_rng(seed)
        m, l, k = num_heads, num_levels, num_points
        c = channels
        scale = 1.0 / np.sqrt(c)
        angles = 2.0 * np.pi * rng.random(m * l * k)
        radii = offset_scale * rng.random(m * l * k)
        offset_bias = np.stack(
            [radii * np.cos(angles), radii * np.sin(angles)], axis=-1).ravel()
        return cls(
            num_heads=m, num_levels=l, num_points=k,
            output_proj=rng.normal(0, scale, size=(m, c, c // m)),
            value_proj=rng.normal(0, scale, size=(m, c // m, c)),
            offset_weight=rng.normal(0, 0.01, size=(m * l * k * 2, c)),
            offset_bias=offset_bias,
            attn_weight=rng.normal(0, 0.01, size=(m * l * k, c)),
            attn_bias=np.zeros(m * l * k),
            clamp_sampling=clamp_sampling,
        )

    @classmethod
    def passthrough(cls, channels: int, clamp_sampling: bool = False) -> "DeformAttnParams":
        """Single head/level/point identity block: output equals the sample at p."""
        c = channels
        return cls(
            num_heads=1, num_levels=1, num_points=1,
            output_proj=np.eye(c)[None, :, :],
            value_proj=np.eye(c)[None, :, :],
            offset_weight=np.zeros((2, c)),
            offset_bias=np.zeros(2),
            attn_weight=np.zeros((1, c)),
            attn_bias=np.zeros(1),
            clamp_sampling=clamp_sampling,
        )


def _check_feats(params: DeformAttnParams, feats: MultiScaleFeatures) -> None:
    if feats.num_levels != params.num_levels:
        raise FusionError(
            f"params expect {params.num_levels} levels, features have {feats.num_levels}")
    if feats.channels != params.channels:
        raise FusionError(
            f"params expect {params.channels} channels, features have {feats.channels}")


def attention_weights(params: DeformAttnParams, queries: np.ndarray) -> np.ndarray:
    """Softmax-normalized sampling weights, shape (N, M, L, K)."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    n = q.shape[0]
    m, l, k = params.num_heads, params.num_levels, params.num_points
    logits = (q @ params.attn_weight.T + params.attn_bias).reshape(n, m, l * k)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(n, m, l, k)


def sampling_offsets(params: DeformAttnParams, queries: np.ndarray) -> np.ndarray:
    """Per-query pixel-space sampling offsets, shape (N, M, L, K, 2)."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    n = q.shape[0]
    m, l, k = params.num_heads, params.num_levels, params.num_points
    return (q @ params.offset_weight.T + params.offset_bias).reshape(n, m, l, k, 2)


def ms_deform_attn_batch(queries: np.ndarray, points: np.ndarray,
                         feats: MultiScaleFeatures,
                         params: DeformAttnParams) -> np.ndarray:
    """Deformable attention for (N, C) queries at (N, 2) normalized points."""
    _check_feats(params, feats)
    q = np.asarray(queries, dtype=float)
    p = np.asarray(points, dtype=float)
    if q.ndim != 2 or p.shape != (q.shape[0], 2):
        raise FusionError(f"bad batch shapes: queries {q.shape}, points {p.shape}")
    n, c = q.shape
    m, nl, k = params.num_heads, params.num_levels, params.num_points

    offs = sampling_offsets(params, q)        # (N, M, L, K, 2)
    attn = attention_weights(params, q)       # (N, M, L, K)

    head_acc = np.zeros((n, m, c // m))
    for l in range(nl):
        fmap = feats.levels[l]
        base = p * _pixel_scale(fmap)          # (N, 2)
        loc = base[:, None, None, :] + offs[:, :, l, :, :]   # (N, M, K, 2)
        sampled = sample_at_pixels(fmap, loc, clamp=params.clamp_sampling)  # (N,M,K,C)
        vals = np.einsum("mdc,nmkc->nmkd", params.value_proj, sampled)
        head_acc += np.einsum("nmk,nmkd->nmd", attn[:, :, l, :], vals)
    return np.einsum("mcd,nmd->nc", params.output_proj, head_acc)


def ms_deform_attn(query: np.ndarray, point: np.ndarray,
                   feats: MultiScaleFeatures, params: DeformAttnParams) -> np.ndarray:
    """Single-query convenience wrapper around the batched kernel."""
    out = ms_deform_attn_batch(
        np.asarray(query, dtype=float)[None, :],
        np.asarray(point, dtype=float)[None, :],
        feats, params)
    return out[0]


def ms_deform_attn_input_grads(query: np.ndarray, point: np.ndarray,
                               feats: MultiScaleFeatures, params: DeformAttnParams,
                               cotangent: np.ndarray):
    """Gradients of ``cotangent @ ms_deform_attn`` w.r.t. feature maps and point.

    The query's own influence on offsets/weights is treated as fixed (those
    nets see the query, not the point or the features), which is exactly the
    path the calibration fit differentiates.
    """
    _check_feats(params, feats)
    q = np.asarray(query, dtype=float)[None, :]
    p = np.asarray(point, dtype=float)
    u = np.asarray(cotangent, dtype=float)
    m, nl, k = params.num_heads, params.num_levels, params.num_points

    offs = sampling_offsets(params, q)[0]     # (M, L, K, 2)
    attn = attention_weights(params, q)[0]    # (M, L, K)
    g_head = np.einsum("mcd,c->md", params.output_proj, u)  # (M, C/M)

    grad_feats = [np.zeros_like(lvl.data) for lvl in feats.levels]
    grad_p = np.zeros(2)
    for l in range(nl):
        fmap = feats.levels[l]
        scale = _pixel_scale(fmap)
        loc = p * scale + offs[:, l, :, :]     # (M, K, 2)
        val, d_du, d_dv = sample_pixels_with_grad(
            fmap, loc, clamp=params.clamp_sampling)
        # cotangent on each sampled C-vector: A_mk * (value_proj^T g_head)
        g_sample = attn[:, l, :, None] * np.einsum(
            "mdc,md->mc", params.value_proj, g_head)[:, None, :]   # (M, K, C)
        scatter_pixel_grad(grad_feats[l], loc, g_sample,
                           clamp=params.clamp_sampling)
        grad_p[0] += np.sum(g_sample * d_du) * scale[0]
        grad_p[1] += np.sum(g_sample * d_dv) * scale[1]
    return grad_feats, grad_p


# ---------------------------------------------------------------------------
# BEV query grids and the two attention stages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BevQueryGrid:
    """Dense grid of fusion queries anchored on the ego ROI."""

    queries: np.ndarray   # (H, W, C)
    cell_size: float      # meters per cell
    origin: np.ndarray    # (2,), ego coords of the minimum corner of cell (0, 0)

    def __post_init__(self):
        qs = np.asarray(self.queries, dtype=float)
        if qs.ndim != 3:
            raise FusionError(f"queries must be (H, W, C), got {qs.shape}")
        if not np.all(np.isfinite(qs)):
            raise FusionError("queries must be finite")
        origin = np.asarray(self.origin, dtype=float)
        if origin.shape != (2,):
            raise FusionError("origin must be a 2-vector")
        object.__setattr__(self, "queries", qs)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int]:
        return self.queries.shape[0], self.queries.shape[1]

    @property
    def channels(self) -> int:
        return self.queries.shape[2]

    @classmethod
    def zeros(cls, h: int, w: int, channels: int, cell_size: float,
              origin=None) -> "BevQueryGrid":
        if origin is None:
            origin = (-0.5 * h * cell_size, -0.5 * w * cell_size)
        return cls(np.zeros((h, w, channels)), cell_size, np.asarray(origin, float))

    def cell_centers(self) -> np.ndarray:
        """Ego-frame centers of every cell, shape (H, W, 2)."""
        h, w = self.dims
        xs = self.origin[0] + (np.arange(h) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(w) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def interp_nodes(self) -> np.ndarray:
        """Normalized coordinates of own cells on the own-grid sampling lattice."""
        h, w = self.dims
        xs = np.arange(h) / max(h - 1, 1)
        ys = np.arange(w) / max(w - 1, 1)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def with_queries(self, queries: np.ndarray) -> "BevQueryGrid":
        return BevQueryGrid(queries, self.cell_size, self.origin)

    def as_feature_map(self) -> BevFeatureMap:
        return BevFeatureMap(self.queries)


@dataclass
class TemporalState:
    """History carried between frames: previous fused grid and ego pose."""

    prev_bev: BevQueryGrid | None = None
    prev_ego_pose: RigidTransform2D | None = None


def vic_cross_attn(queries: BevQueryGrid,
                   f_veh: MultiScaleFeatures,
                   f_inf: MultiScaleFeatures | None,
                   refs: ReferenceBatch,
                   params_veh: DeformAttnParams,
                   params_inf: DeformAttnParams) -> BevQueryGrid:
    """Masked two-branch cross attention over vehicle and infrastructure maps.

    Per query the result sums, over its reference points, the vehicle-branch
    attention plus the infrastructure branch where that point projects inside
    the infrastructure map, weighted 1/(1+mask) so a dual-branch point
    contributes the average of the two sides. Masked-out points never touch
    the infrastructure features at all (``f_inf`` may be None when every
    point is masked).
    """
    h, w = queries.dims
    n = h * w
    if refs.n_queries != n:
        raise FusionError(
            f"reference batch has {refs.n_queries} queries, grid has {n}")
    r = refs.n_refs
    q_flat = queries.queries.reshape(n, queries.channels)
    q_rep = np.repeat(q_flat, r, axis=0)

    veh_out = ms_deform_attn_batch(
        q_rep, refs.veh_normalized.reshape(n * r, 2), f_veh, params_veh
    ).reshape(n, r, -1)

    mask = refs.inf_in_bounds.astype(float)  # (N, R)
    inf_out = np.zeros_like(veh_out)
    sel = refs.inf_in_bounds.reshape(n * r)
    if np.any(sel):
        if f_inf is None:
            raise FusionError(
                "infrastructure features required: some reference points are in bounds")
        inf_flat = ms_deform_attn_batch(
            q_rep[sel], refs.inf_normalized.reshape(n * r, 2)[sel],
            f_inf, params_inf)
        inf_out.reshape(n * r, -1)[sel] = inf_flat

    coef = 1.0 / (1.0 + mask)
    terms = coef[..., None] * (veh_out + mask[..., None] * inf_out)
    out = terms.sum(axis=1)
    return queries.with_queries(out.reshape(h, w, -1))


def warp_history(prev: BevQueryGrid, ego_motion: RigidTransform2D,
                 target: BevQueryGrid) -> BevQueryGrid:
    """Resample the previous grid onto the current one under ego motion.

    ``ego_motion`` maps current-frame ego coordinates to previous-frame ego
    coordinates. Target cells that land outside the previous grid read zero.
    """
    centers = target.cell_centers().reshape(-1, 2)
    prev_coords = ego_motion.apply(centers)
    uv = (prev_coords - prev.origin) / prev.cell_size - 0.5
    warped = sample_at_pixels(prev.as_feature_map(), uv)
    h, w = target.dims
    return target.with_queries(warped.reshape(h, w, -1))


def temporal_self_attn(queries: BevQueryGrid, state: TemporalState,
                       ego_motion: RigidTransform2D,
                       params: DeformAttnParams) -> BevQueryGrid:
    """Deformable self-attention over the query grid and its aligned history.

    Without history this is plain self-attention of the grid over itself.
    With history, the previous fused grid is warped into the current frame
    and both grids are attended with equal weight.
    """
    if params.num_levels != 1:
        raise FusionError("temporal attention expects single-level params")
    h, w = queries.dims
    n = h * w
    q_flat = queries.queries.reshape(n, queries.channels)
    nodes = queries.interp_nodes().reshape(n, 2)

    own = MultiScaleFeatures([queries.as_feature_map()])
    cur = ms_deform_attn_batch(q_flat, nodes, own, params)

    if state.prev_bev is None:
        out = cur
    else:
        if state.prev_bev.dims != queries.dims:
            raise FusionError("history grid dims do not match current grid")
        warped = warp_history(state.prev_bev, ego_motion, queries)
        hist = ms_deform_attn_batch(
            q_flat, nodes, MultiScaleFeatures([warped.as_feature_map()]), params)
        out = 0.5 * (cur + hist)
    return queries.with_queries(out.reshape(h, w, -1))


# ---------------------------------------------------------------------------
# calibration-offset fitting
# ---------------------------------------------------------------------------

def _side_normalizer(roi: Roi) -> np.ndarray:
    return np.array([1.0 / roi.x_span, 1.0 / roi.y_span])


def overlap_sample_points(roi_veh: Roi, roi_inf: Roi,
                          t_bev2veh: RigidTransform2D,
                          t_bev2inf: RigidTransform2D,
                          spacing: float, margin: float = 1.0) -> np.ndarray:
    """Ego-frame grid points whose nominal projections land inside both ROIs."""
    xs = np.arange(roi_veh.x_min + 0.5 * spacing, roi_veh.x_max, spacing)
    ys = np.arange(roi_veh.y_min + 0.5 * spacing, roi_veh.y_max, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    shrunk_inf = Roi(roi_inf.x_min + margin, roi_inf.x_max - margin,
                     roi_inf.y_min + margin, roi_inf.y_max - margin,
                     roi_inf.z_min, roi_inf.z_max)
    shrunk_veh = Roi(roi_veh.x_min + margin, roi_veh.x_max - margin,
                     roi_veh.y_min + margin, roi_veh.y_max - margin,
                     roi_veh.z_min, roi_veh.z_max)
    keep = shrunk_veh.contains_xy(t_bev2veh.apply(pts)) \
        & shrunk_inf.contains_xy(t_bev2inf.apply(pts))
    return pts[keep]


def cec_loss_and_grad(offsets: CalibrationOffsets,
                      sample_pts: np.ndarray,
                      f_veh: MultiScaleFeatures,
                      f_inf: MultiScaleFeatures,
                      t_bev2veh: RigidTransform2D,
                      t_bev2inf: RigidTransform2D,
                      roi_veh: Roi,
                      roi_inf: Roi):
    """Feature-alignment loss and its gradient w.r.t. both offset vectors.

    Loss: mean over sample points of the squared channel distance between the
    two sides' samples, summed over pyramid levels. Gradients flow through
    the bilinear sampling locations only.
    """
    pts = np.asarray(sample_pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise EmptyOverlapError("no overlap sample points")
    n = len(pts)
    veh_xy = t_bev2veh.apply(pts) + offsets.d_veh
    inf_xy = t_bev2inf.apply(pts) + offsets.d_inf
    nv = _side_normalizer(roi_veh)
    ni = _side_normalizer(roi_inf)
    pv = (veh_xy - (roi_veh.x_min, roi_veh.y_min)) * nv
    pi = (inf_xy - (roi_inf.x_min, roi_inf.y_min)) * ni

    loss = 0.0
    grad_veh = np.zeros(2)
    grad_inf = np.zeros(2)
    for lvl_v, lvl_i in zip(f_veh.levels, f_inf.levels):
        sv = _pixel_scale(lvl_v)
        si = _pixel_scale(lvl_i)
        a, a_du, a_dv = sample_pixels_with_grad(lvl_v, pv * sv)
        b, b_du, b_dv = sample_pixels_with_grad(lvl_i, pi * si)
        resid = a - b
        loss += float(np.sum(resid * resid)) / n
        # d loss / d veh offsets: 2 r . da/dp * dp/doffset, averaged over points
        grad_veh[0] += 2.0 * float(np.sum(resid * a_du)) * sv[0] * nv[0] / n
        grad_veh[1] += 2.0 * float(np.sum(resid * a_dv)) * sv[1] * nv[1] / n
        grad_inf[0] += -2.0 * float(np.sum(resid * b_du)) * si[0] * ni[0] / n
        grad_inf[1] += -2.0 * float(np.sum(resid * b_dv)) * si[1] * ni[1] / n
    return loss, grad_veh, grad_inf


@dataclass
class CecFitResult:
    offsets: CalibrationOffsets
    loss_history: list[float]
    n_samples: int
    converged: bool


def cec_fit(f_veh: MultiScaleFeatures,
            f_inf: MultiScaleFeatures,
            t_bev2veh: RigidTransform2D,
            t_bev2inf: RigidTransform2D,
            roi_veh: Roi,
            roi_inf: Roi,
            init: CalibrationOffsets,
            lr: float = 0.05,
            iters: int = 200,
            sample_spacing: float = 2.0,
            fit_veh: bool = False,
            init_scan_radius: float = 0.0,
            init_scan_step: float = 0.5) -> CecFitResult:
    """Fit calibration offsets by gradient descent on the alignment loss.

    Only the infrastructure-side offset is optimized by default: with both
    sides free the loss has a flat direction (shifting both consistently
    keeps the two samples aligned with each other), so the vehicle side is
    pinned as the reference unless ``fit_veh`` is set.

    ``init_scan_radius`` > 0 prepends a deterministic coarse grid scan of
    infrastructure offsets around the init and starts descent from the best
    cell; useful when the miscalibration may exceed the attraction basin of
    the finest level.
    """
    pts = overlap_sample_points(roi_veh, roi_inf, t_bev2veh, t_bev2inf,
                                spacing=sample_spacing)
    if len(pts) == 0:
        raise EmptyOverlapError(
            "vehicle and infrastructure ROIs share no sample points")

    offsets = init
    if init_scan_radius > 0.0:
        best = (np.inf, offsets.d_inf)
        steps = np.arange(-init_scan_radius, init_scan_radius + 1e-9, init_scan_step)
        for dx in steps:
            for dy in steps:
                cand = init.d_inf + (dx, dy)
                if np.any(np.abs(cand) > init.bound):
                    continue
                trial = offsets.with_inf(cand)
                loss, _, _ = cec_loss_and_grad(
                    trial, pts, f_veh, f_inf, t_bev2veh, t_bev2inf,
                    roi_veh, roi_inf)
                if loss < best[0]:
                    best = (loss, cand)
        offsets = offsets.with_inf(best[1])

    history: list[float] = []
    rising = 0
    prev_loss = np.inf
    for _ in range(iters):
        loss, g_veh, g_inf = cec_loss_and_grad(
            offsets, pts, f_veh, f_inf, t_bev2veh, t_bev2inf, roi_veh, roi_inf)
        history.append(loss)
        if loss > prev_loss:
            rising += 1
            if rising >= 10:
                raise DivergenceError(
                    f"alignment loss rose for {rising} consecutive steps "
                    f"(last {loss:.6g}, lr {lr}); reduce lr or check features",
                    history=history)
        else:
            rising = 0
        prev_loss = loss

        d_inf = np.clip(offsets.d_inf - lr * g_inf, -init.bound, init.bound)
        offsets = offsets.with_inf(d_inf)
        if fit_veh:
            d_veh = np.clip(offsets.d_veh - lr * g_veh, -init.bound, init.bound)
            offsets = offsets.with_veh(d_veh)
    final_loss, _, _ = cec_loss_and_grad(
        offsets, pts, f_veh, f_inf, t_bev2veh, t_bev2inf, roi_veh, roi_inf)
    history.append(final_loss)
    return CecFitResult(offsets=offsets, loss_history=history,
                        n_samples=len(pts), converged=True)
