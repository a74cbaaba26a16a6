"""Fixed affine resampler carrying SA probabilities into the LA plane.

The operator is linear with no parameters: every LA voxel is a trilinear
blend of (at most) 8 SA voxels. Corner indices and weights are computed
once per case, so forward is a gather and backward the matching scatter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import GeometryError, ShapeError
from .volume import AffineTransform, Geometry, sampling_matrix

# unit-cube corner offsets in (row, col, slice) order
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class GstContext:
    transform: AffineTransform
    source_geometry: Geometry
    target_geometry: Geometry
    voxel_map: np.ndarray  # 4x4, target voxel index -> source voxel index
    sampling_grid: np.ndarray  # target shape + (3,), continuous source voxel coords
    indices: np.ndarray  # (n_target, 8) flat source indices, 0 where unused
    weights: np.ndarray  # (n_target, 8) trilinear weights, 0 for out-of-bounds corners

    @property
    def source_shape(self) -> tuple[int, int, int]:
        return self.source_geometry.shape

    @property
    def target_shape(self) -> tuple[int, int, int]:
        return self.target_geometry.shape

    def in_bounds(self) -> np.ndarray:
        """Target voxels that receive any weight."""
        return (self.weights.sum(axis=1) > 0).reshape(self.target_shape)


def _check_warp(warp, name):
    if warp is None:
        return np.eye(4)
    warp = np.asarray(warp, dtype=np.float64)
    if warp.shape != (4, 4) or abs(np.linalg.det(warp[:3, :3])) <= 1e-12:
        raise GeometryError(f"{name} must be an invertible 4x4 voxel map")
    return warp


def build_context(transform: AffineTransform, source_geometry: Geometry, target_geometry: Geometry,
                  source_warp=None, target_warp=None) -> GstContext:
    """Precompute the sampling of ``source_geometry`` at every ``target_geometry`` voxel.

    ``transform`` maps source world to target world. The optional warps are
    voxel-space maps from a resampled (e.g. augmented) lattice back to the
    lattice the geometry describes, for target and source respectively.
    """
    if not isinstance(transform, AffineTransform):
        transform = AffineTransform(np.asarray(transform, dtype=np.float64))
    if abs(np.linalg.det(transform.linear)) <= 1e-9:
        raise GeometryError("GST transform is not invertible")
    src_warp = _check_warp(source_warp, "source_warp")
    tgt_warp = _check_warp(target_warp, "target_warp")
    m = np.linalg.inv(src_warp) @ sampling_matrix(source_geometry, target_geometry, transform) @ tgt_warp

    shape = target_geometry.shape
    lattice = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)
    grid = lattice @ m[:3, :3].T + m[:3, 3]
    pts = grid.reshape(-1, 3)

    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    corners = base[:, None, :] + _CORNERS[None, :, :]
    w = np.prod(np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    src_shape = np.asarray(source_geometry.shape)
    valid = np.all((corners >= 0) & (corners < src_shape), axis=2)
    w = np.where(valid, w, 0.0)
    flat = np.ravel_multi_index(tuple(np.where(valid[..., None], corners, 0).transpose(2, 0, 1)), tuple(src_shape))

    for arr in (grid, flat, w, m):
        arr.setflags(write=False)
    return GstContext(transform, source_geometry, target_geometry, m, grid, flat, w)


def _check_source(ctx: GstContext, field) -> np.ndarray:
    field = np.asarray(field)
    if field.shape[-3:] != ctx.source_shape:
        raise ShapeError(f"GST input extents {field.shape[-3:]} do not match source {ctx.source_shape}")
    return field


def forward(ctx: GstContext, sa_field) -> np.ndarray:
    """Trilinear sample of an SA field (optionally with leading batch axes) on the LA lattice."""
    x = _check_source(ctx, sa_field)
    lead = x.shape[:-3]
    flat = x.reshape(lead + (-1,))
    out = (flat[..., ctx.indices] * ctx.weights).sum(axis=-1)
    return out.reshape(lead + ctx.target_shape)


def backward(ctx: GstContext, upstream) -> np.ndarray:
    """Adjoint of :func:`forward`: scatter LA gradients to SA voxels by the same weights."""
    g = np.asarray(upstream)
    if g.shape[-3:] != ctx.target_shape:
        raise ShapeError(f"upstream extents {g.shape[-3:]} do not match target {ctx.target_shape}")
    lead = g.shape[:-3]
    g = g.reshape((-1, int(np.prod(ctx.target_shape))))
    n_src = int(np.prod(ctx.source_shape))
    idx = ctx.indices.ravel()
    out = np.stack([np.bincount(idx, weights=(ctx.weights * row[:, None]).ravel(), minlength=n_src) for row in g])
    return out.reshape(lead + ctx.source_shape)


class _GstFunction(torch.autograd.Function):
    @staticmethod
    def forward(fctx, x, indices, weights, target_shape):
        lead = x.shape[:-3]
        flat = x.reshape(lead + (-1,))
        out = (flat[..., indices] * weights).sum(dim=-1)
        fctx.save_for_backward(indices, weights)
        fctx.source_shape = x.shape
        return out.reshape(lead + tuple(target_shape))

    @staticmethod
    def backward(fctx, grad):
        indices, weights = fctx.saved_tensors
        shape = fctx.source_shape
        lead = shape[:-3]
        g = grad.reshape(lead + (-1, 1)) * weights
        out = torch.zeros(lead + (int(np.prod(shape[-3:])),), dtype=grad.dtype, device=grad.device)
        out.index_add_(out.dim() - 1, indices.reshape(-1), g.reshape(lead + (-1,)))
        return out.reshape(shape), None, None, None


class GstLayer:
    """Torch view of a context; holds no trainable state."""

    def __init__(self, ctx: GstContext):
        self.ctx = ctx
        self._indices = torch.from_numpy(np.array(ctx.indices))
        self._weights = {}

    def parameters(self):
        return iter(())

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.ctx.source_shape:
            raise ShapeError(f"GST input extents {tuple(x.shape[-3:])} do not match source {self.ctx.source_shape}")
        w = self._weights.get(x.dtype)
        if w is None:
            w = self._weights[x.dtype] = torch.from_numpy(np.array(self.ctx.weights)).to(x.dtype)
        return _GstFunction.apply(x, self._indices, w, self.ctx.target_shape)
