"""Random training-time transforms applied per view.

Geometric draws (in-plane rotation, anisotropic scale) resample image and
mask on the same lattice. The voxel warp of each view is returned so the
caller can rebuild the SA->LA sampling context for the augmented lattices.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .roi import PreprocessedCase
from .volume import SegmentationMask, VolumeGrid

Range = tuple[float, float]


class AugmentationPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    rotation_deg: float = Field(15.0, ge=0)
    scale_range: Range = (0.9, 1.1)
    blur_sigma: Range = (0.0, 1.5)
    noise_sigma: Range = (0.0, 0.1)
    shift: float = Field(0.1, ge=0)
    inpaint_count: tuple[int, int] = (0, 3)
    inpaint_size: tuple[int, int] = (8, 32)
    p_rotation: float = Field(0.5, ge=0, le=1)
    p_scale: float = Field(0.5, ge=0, le=1)
    p_blur: float = Field(0.5, ge=0, le=1)
    p_noise: float = Field(0.5, ge=0, le=1)
    p_shift: float = Field(0.5, ge=0, le=1)
    p_inpaint: float = Field(0.5, ge=0, le=1)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("scale_range", "blur_sigma", "noise_sigma", "inpaint_count", "inpaint_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-negative (low, high) pair")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        return self

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(p_rotation=0, p_scale=0, p_blur=0, p_noise=0, p_shift=0, p_inpaint=0)


@dataclass(frozen=True)
class ViewDraw:
    angle_deg: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    blur: float = 0.0
    noise: float = 0.0
    shift: float = 0.0
    squares: tuple = ()  # (row, col, slice, size)

    @property
    def geometric(self) -> bool:
        return self.angle_deg != 0.0 or self.scale != (1.0, 1.0)


def draw_view(policy: AugmentationPolicy, rng: np.random.Generator, shape) -> ViewDraw:
    # every coin is flipped whether or not it lands, so the stream layout is fixed
    coins = rng.random(6)
    angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
    scale = tuple(float(s) for s in rng.uniform(*policy.scale_range, size=2))
    blur = rng.uniform(*policy.blur_sigma)
    noise = rng.uniform(*policy.noise_sigma)
    shift = rng.uniform(-policy.shift, policy.shift)
    n_sq = int(rng.integers(policy.inpaint_count[0], policy.inpaint_count[1] + 1))
    squares = []
    for _ in range(n_sq):
        size = int(rng.integers(policy.inpaint_size[0], policy.inpaint_size[1] + 1))
        size = min(size, shape[0], shape[1])
        r = int(rng.integers(0, shape[0] - size + 1))
        c = int(rng.integers(0, shape[1] - size + 1))
        k = int(rng.integers(0, shape[2]))
        squares.append((r, c, k, size))
    return ViewDraw(
        angle_deg=float(angle) if coins[0] < policy.p_rotation else 0.0,
        scale=scale if coins[1] < policy.p_scale else (1.0, 1.0),
        blur=float(blur) if coins[2] < policy.p_blur else 0.0,
        noise=float(noise) if coins[3] < policy.p_noise else 0.0,
        shift=float(shift) if coins[4] < policy.p_shift else 0.0,
        squares=tuple(squares) if coins[5] < policy.p_inpaint else (),
    )


def inplane_warp(shape, angle_deg: float, scale=(1.0, 1.0)) -> np.ndarray:
    """4x4 voxel map from the output lattice to the input lattice, about the in-plane centre.

    Content is rotated by ``angle_deg`` and stretched by ``scale`` per axis,
    so the lattice map applies the inverse.
    """
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    forward = rot @ np.diag(scale)
    inv = np.linalg.inv(forward)
    c = (np.asarray(shape[:2], dtype=np.float64) - 1) / 2
    m = np.eye(4)
    m[:2, :2] = inv
    m[:2, 3] = c - inv @ c
    return m


def warp_array(arr: np.ndarray, warp: np.ndarray, order: int) -> np.ndarray:
    """Resample ``arr`` so output voxel u takes the value at input voxel ``warp @ u``; outside is 0."""
    return ndimage.affine_transform(np.asarray(arr, dtype=np.float64), warp[:3, :3], offset=warp[:3, 3],
                                    order=order, mode="constant", cval=0.0)


def _intensity(x: np.ndarray, d: ViewDraw, rng: np.random.Generator) -> np.ndarray:
    if d.blur > 0:
        x = ndimage.gaussian_filter(x, sigma=(d.blur, d.blur, 0), mode="nearest")
    noise = rng.standard_normal(x.shape)
    if d.noise > 0:
        x = x + d.noise * noise
    x = x + d.shift
    if d.squares:
        x = x.copy()
        for r, c, k, s in d.squares:
            x[r:r + s, c:c + s, k] = 0.0
    return x


@dataclass(frozen=True, eq=False)
class AugmentedCase:
    case: PreprocessedCase
    sa_warp: np.ndarray
    la_warp: np.ndarray
    draws: dict


def augment_view(image: VolumeGrid, mask: SegmentationMask | None, draw: ViewDraw, rng: np.random.Generator):
    warp = inplane_warp(image.shape, draw.angle_deg, draw.scale)
    x = np.asarray(image.voxels, dtype=np.float64)
    m = None if mask is None else mask.labels
    if draw.geometric:
        x = warp_array(x, warp, order=1)
        if m is not None:
            m = warp_array(m, warp, order=0).astype(np.uint8)
    x = _intensity(x, draw, rng)
    out_img = image.with_voxels(x.astype(np.asarray(image.voxels).dtype))
    out_mask = None if mask is None else (mask.with_labels(m) if draw.geometric else mask)
    return out_img, out_mask, warp


def augment_case(case: PreprocessedCase, policy: AugmentationPolicy, draw_seed: int) -> AugmentedCase:
    """Independent draws for SA and LA; deterministic in (policy, draw_seed)."""
    rng = np.random.default_rng([policy.seed, draw_seed])
    sa_draw = draw_view(policy, rng, case.sa.shape)
    la_draw = draw_view(policy, rng, case.la.shape)
    sa, sa_mask, sa_warp = augment_view(case.sa, case.sa_mask, sa_draw, rng)
    la, la_mask, la_warp = augment_view(case.la, case.la_mask, la_draw, rng)
    out = dataclasses.replace(case, sa=sa, la=la, sa_mask=sa_mask, la_mask=la_mask)
    return AugmentedCase(out, sa_warp, la_warp, {"sa": sa_draw, "la": la_draw})
