"""Physical-space image model: grids with geometry, affine maps, resampling and NIfTI IO.

Axis order is always (row, col, slice). A voxel index ``i`` maps to world
millimetres as ``origin + direction @ diag(spacing) @ i``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import GeometryError, ShapeError, VolumeIOError

Interpolation = Literal["nearest", "linear", "cubic_spline"]

SPLINE_ORDER = {"nearest": 0, "linear": 1, "cubic_spline": 3}
ORTHO_TOL = 1e-6
_GEOMETRY_EXT_KEY = "tempera_geometry"


def _order(interpolation: str) -> int:
    try:
        return SPLINE_ORDER[interpolation]
    except KeyError:
        raise ValueError(f"unknown interpolation {interpolation!r}; expected one of {sorted(SPLINE_ORDER)}") from None


def _clean_geometry(spacing, origin, direction):
    spacing = np.asarray(spacing, dtype=np.float64).reshape(-1)
    origin = np.asarray(origin, dtype=np.float64).reshape(-1)
    direction = np.eye(3) if direction is None else np.asarray(direction, dtype=np.float64)
    if spacing.shape != (3,) or origin.shape != (3,) or direction.shape != (3, 3):
        raise GeometryError("spacing and origin must be 3-vectors and direction a 3x3 matrix")
    if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
        raise GeometryError(f"spacing must be positive and finite, got {spacing.tolist()}")
    if not np.all(np.isfinite(origin)):
        raise GeometryError(f"origin must be finite, got {origin.tolist()}")
    err = np.abs(direction.T @ direction - np.eye(3)).max()
    if not np.isfinite(err) or err > ORTHO_TOL:
        raise GeometryError(f"direction is not orthonormal (max |D^T D - I| = {err:.3g})")
    for arr in (spacing, origin, direction):
        arr.setflags(write=False)
    return spacing, origin, direction


def _clean_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"volumes must be 3D with every extent >= 1, got {shape}")
    return shape


@dataclass(frozen=True, eq=False)
class Geometry:
    """Lattice extents plus physical placement, without any voxel payload."""

    shape: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", _clean_shape(self.shape))
        sp, org, d = _clean_geometry(self.spacing, self.origin, self.direction)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "direction", d)

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index -> world-mm matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction * self.spacing[None, :]
        a[:3, 3] = self.origin
        return a

    @property
    def inverse_affine(self) -> np.ndarray:
        a = np.eye(4)
        a[:3, :3] = self.direction.T / self.spacing[:, None]
        a[:3, 3] = -a[:3, :3] @ self.origin
        return a

    def voxel_to_world(self, index) -> np.ndarray:
        # explicit per-axis accumulation: one point or a batch gives bit-identical results
        scaled = np.asarray(index, dtype=np.float64) * self.spacing
        d = self.direction
        return self.origin + scaled[..., 0:1] * d[:, 0] + scaled[..., 1:2] * d[:, 1] + scaled[..., 2:3] * d[:, 2]

    def world_to_voxel(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=np.float64)
        return ((point - self.origin) @ self.direction) / self.spacing

    def center_world(self) -> np.ndarray:
        return self.voxel_to_world((np.asarray(self.shape) - 1) / 2.0)

    def shifted(self, start: Sequence[int], shape: Sequence[int]) -> "Geometry":
        """Geometry of the sub-lattice whose voxel 0 sits at ``start`` (may be negative)."""
        return Geometry(tuple(shape), self.spacing, self.voxel_to_world(np.asarray(start, float)), self.direction)

    def mismatch(self, other: "Geometry", atol: float = 1e-6) -> str | None:
        """Name of the first field that differs from ``other``, or None."""
        if self.shape != other.shape:
            return "shape"
        for name in ("spacing", "origin", "direction"):
            if not np.allclose(getattr(self, name), getattr(other, name), rtol=0, atol=atol):
                return name
        return None

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing": self.spacing.tolist(),
            "origin": self.origin.tolist(),
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(tuple(d["shape"]), d["spacing"], d["origin"], d["direction"])


class _Gridded:
    """Geometry accessors shared by VolumeGrid and SegmentationMask."""

    @property
    def array(self) -> np.ndarray:  # pragma: no cover - overridden
        raise NotImplementedError

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.array.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.shape, self.spacing, self.origin, self.direction)

    @property
    def affine(self) -> np.ndarray:
        return self.geometry.affine


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VolumeGrid(_Gridded):
    """Scalar voxel lattice with physical geometry. Immutable after construction.

    2D payloads are promoted to depth-1 volumes, which is how long-axis
    images are carried.
    """

    voxels: np.ndarray
    spacing: np.ndarray = (1.0, 1.0, 1.0)
    origin: np.ndarray = (0.0, 0.0, 0.0)
    direction: np.ndarray | None = None

    def __post_init__(self):
        vox = _freeze(self.voxels)
        _clean_shape(vox.shape)
        object.__setattr__(self, "voxels", vox)
        sp, org, d = _clean_geometry(self.spacing, self.origin, self.direction)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "direction", d)

    @property
    def array(self) -> np.ndarray:
        return self.voxels

    @classmethod
    def from_geometry(cls, voxels, geometry: Geometry) -> "VolumeGrid":
        voxels = np.asarray(voxels)
        if voxels.ndim == 2:
            voxels = voxels[:, :, None]
        if voxels.shape != geometry.shape:
            raise ShapeError(f"voxel extents {voxels.shape} do not match geometry {geometry.shape}")
        return cls(voxels, geometry.spacing, geometry.origin, geometry.direction)

    def with_voxels(self, voxels) -> "VolumeGrid":
        return VolumeGrid.from_geometry(voxels, self.geometry)


@dataclass(frozen=True, eq=False)
class SegmentationMask(_Gridded):
    """Binary RV label map (0 background, 1 RV) co-registered with an image."""

    labels: np.ndarray
    spacing: np.ndarray = (1.0, 1.0, 1.0)
    origin: np.ndarray = (0.0, 0.0, 0.0)
    direction: np.ndarray | None = None

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.size and not np.isin(lab, (0, 1)).all():
            raise ValueError("mask labels must be 0 (background) or 1 (RV)")
        lab = _freeze(lab.astype(np.uint8))
        _clean_shape(lab.shape)
        object.__setattr__(self, "labels", lab)
        sp, org, d = _clean_geometry(self.spacing, self.origin, self.direction)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "direction", d)

    @property
    def array(self) -> np.ndarray:
        return self.labels

    @classmethod
    def from_geometry(cls, labels, geometry: Geometry) -> "SegmentationMask":
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[:, :, None]
        if labels.shape != geometry.shape:
            raise ShapeError(f"label extents {labels.shape} do not match geometry {geometry.shape}")
        return cls(labels, geometry.spacing, geometry.origin, geometry.direction)

    def with_labels(self, labels) -> "SegmentationMask":
        return SegmentationMask.from_geometry(labels, self.geometry)

    def as_volume(self) -> VolumeGrid:
        return VolumeGrid.from_geometry(self.labels, self.geometry)


Gridded = Union[VolumeGrid, SegmentationMask]


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """4x4 homogeneous world(mm) -> world(mm) map."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("affine matrix contains non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError(f"affine bottom row must be [0, 0, 0, 1], got {m[3].tolist()}")
        if abs(np.linalg.det(m[:3, :3])) <= 1e-9:
            raise GeometryError("affine linear block is singular (|det| <= 1e-9)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, offset) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = offset
        return cls(m)

    @classmethod
    def from_linear(cls, linear, offset=(0.0, 0.0, 0.0), center=None) -> "AffineTransform":
        """x -> linear @ (x - center) + center + offset."""
        linear = np.asarray(linear, dtype=np.float64)
        center = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = center - linear @ center + np.asarray(offset, dtype=np.float64)
        return cls(m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.linear.T + self.offset

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(np.asarray(d["matrix"], dtype=np.float64))


def voxel_to_world(grid: Gridded | Geometry, index) -> np.ndarray:
    geom = grid if isinstance(grid, Geometry) else grid.geometry
    return geom.voxel_to_world(index)


def world_to_voxel(grid: Gridded | Geometry, point) -> np.ndarray:
    geom = grid if isinstance(grid, Geometry) else grid.geometry
    return geom.world_to_voxel(point)


def resampled_geometry(geometry: Geometry, target_spacing) -> Geometry:
    """Lattice covering the same physical box at a new spacing (centre preserved)."""
    target = np.asarray(target_spacing, dtype=np.float64).reshape(-1)
    if target.shape != (3,) or np.any(~np.isfinite(target)) or np.any(target <= 0):
        raise GeometryError(f"target spacing must be three positive values, got {target.tolist()}")
    n = np.asarray(geometry.shape, dtype=np.float64)
    new_shape = tuple(max(1, int(math.floor(x + 0.5))) for x in n * geometry.spacing / target)
    half_old = (n - 1) / 2.0 * geometry.spacing
    half_new = (np.asarray(new_shape) - 1) / 2.0 * target
    origin = geometry.origin + geometry.direction @ (half_old - half_new)
    return Geometry(new_shape, target, origin, geometry.direction)


def resample(grid: Gridded, target_spacing, interpolation: Interpolation | None = None) -> Gridded:
    """Resample onto a new spacing over the same physical extent.

    Defaults to cubic B-spline for images and nearest neighbour for masks;
    borders are extended by replication so constant images stay constant.
    """
    is_mask = isinstance(grid, SegmentationMask)
    if interpolation is None:
        interpolation = "nearest" if is_mask else "cubic_spline"
    order = _order(interpolation)
    src = grid.geometry
    dst = resampled_geometry(src, target_spacing)
    # per-axis: i = (o'-o).d_k/s_k + j * s'_k/s_k  (shared direction)
    scale = dst.spacing / src.spacing
    offset = (src.direction.T @ (dst.origin - src.origin)) / src.spacing
    data = np.asarray(grid.array, dtype=np.float64)
    out = ndimage.affine_transform(data, np.diag(scale), offset=offset, output_shape=dst.shape, order=order, mode="nearest")
    if is_mask:
        return SegmentationMask.from_geometry(np.rint(out).clip(0, 1).astype(np.uint8), dst)
    return VolumeGrid.from_geometry(out.astype(grid.voxels.dtype, copy=False), dst)


def sampling_matrix(source: Geometry, reference: Geometry, transform: AffineTransform | None) -> np.ndarray:
    """4x4 map from reference voxel index to source voxel index through world space."""
    t_inv = np.eye(4) if transform is None else np.linalg.inv(transform.matrix)
    return source.inverse_affine @ t_inv @ reference.affine


def resample_onto(
    source: Gridded,
    reference: Gridded | Geometry,
    transform: AffineTransform | None = None,
    interpolation: Interpolation | None = None,
) -> Gridded:
    """Sample ``source`` on ``reference``'s lattice.

    ``transform`` maps source world coordinates to reference world
    coordinates, so every reference voxel is read from
    ``transform^-1(world(voxel))`` in the source. Out-of-bounds samples are 0.
    """
    ref = reference if isinstance(reference, Geometry) else reference.geometry
    is_mask = isinstance(source, SegmentationMask)
    if interpolation is None:
        interpolation = "nearest" if is_mask else "linear"
    m = sampling_matrix(source.geometry, ref, transform)
    data = np.asarray(source.array, dtype=np.float64)
    out = ndimage.affine_transform(
        data, m[:3, :3], offset=m[:3, 3], output_shape=ref.shape, order=_order(interpolation), mode="grid-constant", cval=0.0
    )
    if is_mask:
        return SegmentationMask.from_geometry(np.rint(out).clip(0, 1).astype(np.uint8), ref)
    return VolumeGrid.from_geometry(out.astype(source.voxels.dtype, copy=False), ref)


# ----------------------------------------------------------------------------- IO


def _nifti():
    import nibabel

    return nibabel


def write_volume(grid: Gridded, path) -> Path:
    """Write a volume or mask as NIfTI-1; masks are stored as uint8."""
    nib = _nifti()
    path = Path(path)
    geom = grid.geometry
    data = np.asarray(grid.array)
    if isinstance(grid, SegmentationMask):
        data = data.astype(np.uint8)
    img = nib.Nifti1Image(np.ascontiguousarray(data), geom.affine)
    img.set_sform(geom.affine, code=1)
    img.set_qform(geom.affine, code=1)
    img.header.set_zooms(tuple(float(s) for s in geom.spacing))
    img.header.set_data_dtype(data.dtype)
    # sform is float32 on disk; keep the exact float64 geometry alongside it
    payload = json.dumps({_GEOMETRY_EXT_KEY: geom.to_dict()}).encode()
    img.header.extensions.append(nib.nifti1.Nifti1Extension("comment", payload))
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


def _exact_geometry(img) -> dict | None:
    for ext in img.header.extensions:
        try:
            content = json.loads(ext.get_content())
        except (ValueError, TypeError, UnicodeDecodeError):
            continue
        if isinstance(content, dict) and _GEOMETRY_EXT_KEY in content:
            return content[_GEOMETRY_EXT_KEY]
    return None


def _load(path):
    nib = _nifti()
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types for corrupt files
        raise VolumeIOError(f"{path}: unreadable NIfTI ({exc})") from exc
    hdr = img.header
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise VolumeIOError(f"{path}: field 'dim' describes a {data.ndim}D payload; only 2D/3D supported")
    pixdim = np.asarray(hdr["pixdim"][1:4], dtype=np.float64)
    if not np.all(np.isfinite(pixdim)) or np.any(pixdim <= 0):
        raise VolumeIOError(f"{path}: field 'pixdim' has non-positive spacing {pixdim.tolist()}")
    if int(hdr["sform_code"]) > 0:
        affine, field = np.asarray(hdr.get_sform(), dtype=np.float64), "sform"
    elif int(hdr["qform_code"]) > 0:
        affine, field = np.asarray(hdr.get_qform(), dtype=np.float64), "qform"
    else:
        raise VolumeIOError(f"{path}: field 'sform_code' is 0 and no qform either; geometry unknown")
    direction = affine[:3, :3] / pixdim[None, :]
    err = np.abs(direction.T @ direction - np.eye(3)).max()
    if not np.isfinite(err) or err > 1e-4:
        raise VolumeIOError(f"{path}: field '{field}' direction is not orthonormal (error {err:.3g})")
    u, _, vt = np.linalg.svd(direction)
    direction = u @ vt
    origin = affine[:3, 3]
    exact = _exact_geometry(img)
    if exact is not None:
        spacing_x = np.asarray(exact["spacing"], float)
        origin_x = np.asarray(exact["origin"], float)
        direction_x = np.asarray(exact["direction"], float)
        if (
            np.allclose(spacing_x, pixdim, rtol=1e-5, atol=1e-5)
            and np.allclose(origin_x, origin, rtol=1e-5, atol=1e-3)
            and np.allclose(direction_x, direction, atol=1e-4)
        ):
            pixdim, origin, direction = spacing_x, origin_x, direction_x
    try:
        geom = Geometry(data.shape, pixdim, origin, direction)
    except (GeometryError, ShapeError) as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc
    return data, geom


def read_volume(path) -> VolumeGrid:
    """Read a NIfTI image. Voxels keep their on-disk dtype."""
    data, geom = _load(path)
    return VolumeGrid.from_geometry(data, geom)


def read_mask(path) -> SegmentationMask:
    data, geom = _load(path)
    try:
        return SegmentationMask.from_geometry(data, geom)
    except ValueError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc
