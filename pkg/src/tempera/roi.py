"""Heart localisation from ED/ES motion, ROI cropping and intensity standardisation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from skimage.feature import canny
from skimage.transform import hough_circle

from .errors import DetectionError, GeometryError
from .volume import Geometry, SegmentationMask, VolumeGrid, resample


class RoiConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    inplane_spacing: float = Field(1.25, gt=0)
    canny_sigma: float = Field(2.0, ge=0)
    canny_low: float = Field(0.1, ge=0)
    canny_high: float = Field(0.2, ge=0)
    radius_range: tuple[int, int] = (8, 60)
    central_fraction: float = Field(0.6, gt=0, le=1)
    sa_extent: tuple[int, int, int] = (192, 192, 17)
    la_extent: tuple[int, int, int] = (192, 192, 1)

    @model_validator(mode="after")
    def _check(self):
        if self.canny_high < self.canny_low:
            raise ValueError("canny_high must be >= canny_low")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise ValueError("radius_range must satisfy 1 <= min <= max")
        if self.la_extent[2] != 1:
            raise ValueError("LA target extent must have exactly one slice")
        return self

    def extent(self, view: str) -> tuple[int, int, int]:
        return self.sa_extent if view == "sa" else self.la_extent


@dataclass(frozen=True)
class RoiDetection:
    center: tuple[float, float]
    radius: float
    confidence: float

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius, "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: dict) -> "RoiDetection":
        return cls(tuple(d["center"]), float(d["radius"]), float(d["confidence"]))


@dataclass(frozen=True)
class CropRecord:
    """Where a standardized window sits in the resampled source.

    Output voxel ``o`` reads source voxel ``o - padding + offsets`` on every axis.
    Both vectors are non-negative; padding is only used when the source is
    smaller than the window.
    """

    offsets: tuple[int, int, int]
    padding: tuple[int, int, int]
    extent: tuple[int, int, int]
    source_shape: tuple[int, int, int]

    @property
    def start(self) -> np.ndarray:
        """Source index of output voxel 0 (negative when padded)."""
        return np.asarray(self.offsets) - np.asarray(self.padding)

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("offsets", "padding", "extent", "source_shape")}

    @classmethod
    def from_dict(cls, d: dict) -> "CropRecord":
        return cls(*(tuple(int(x) for x in d[k]) for k in ("offsets", "padding", "extent", "source_shape")))

    def extract(self, arr: np.ndarray) -> np.ndarray:
        if arr.shape != self.source_shape:
            raise GeometryError(f"array extents {arr.shape} do not match crop source {self.source_shape}")
        out = np.zeros(self.extent, dtype=arr.dtype)
        src, dst = self._slices()
        out[dst] = arr[src]
        return out

    def insert(self, window: np.ndarray, fill=0) -> np.ndarray:
        """Inverse of :meth:`extract`: place the window back in a source-sized array."""
        if window.shape != self.extent:
            raise GeometryError(f"window extents {window.shape} do not match crop extent {self.extent}")
        out = np.full(self.source_shape, fill, dtype=window.dtype)
        src, dst = self._slices()
        out[src] = window[dst]
        return out

    def _slices(self):
        src, dst = [], []
        for off, pad, w, n in zip(self.offsets, self.padding, self.extent, self.source_shape):
            m = min(w - pad, n - off)
            if off < 0 or pad < 0 or m <= 0:
                raise GeometryError(f"inconsistent crop record {self.to_dict()}")
            src.append(slice(off, off + m))
            dst.append(slice(pad, pad + m))
        return tuple(src), tuple(dst)


def motion_difference(ed: VolumeGrid, es: VolumeGrid) -> VolumeGrid:
    """Voxelwise |ED - ES| on the shared grid."""
    bad = ed.geometry.mismatch(es.geometry)
    if bad is not None:
        raise GeometryError(f"ED and ES differ in {bad}")
    diff = np.abs(np.asarray(ed.voxels, dtype=np.float64) - np.asarray(es.voxels, dtype=np.float64))
    return ed.with_voxels(diff)


def gradient_magnitude(image: np.ndarray, sigma: float) -> np.ndarray:
    # same smoothing/Sobel recipe skimage's canny applies internally
    smoothed = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="constant", truncate=4.0)
    return np.hypot(ndimage.sobel(smoothed, axis=0), ndimage.sobel(smoothed, axis=1))


def canny_edges(image: np.ndarray, low_threshold: float = 0.1, high_threshold: float = 0.2,
                smoothing_sigma: float = 2.0, relative: bool = True) -> np.ndarray:
    """Binary Canny edge map of a 2D slice.

    With ``relative`` the thresholds are fractions of the slice's maximum
    smoothed gradient magnitude; otherwise they are absolute.
    """
    if not 0 <= low_threshold <= high_threshold:
        raise ValueError("need 0 <= low_threshold <= high_threshold")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"canny_edges expects a 2D slice, got shape {image.shape}")
    if relative:
        peak = gradient_magnitude(image, smoothing_sigma).max()
        if peak <= 1e-12:
            return np.zeros(image.shape, dtype=bool)
        low_threshold, high_threshold = low_threshold * peak, high_threshold * peak
    return canny(image, sigma=smoothing_sigma, low_threshold=low_threshold, high_threshold=high_threshold)


def detect_heart_roi(edge_stack, radius_range: Sequence[int] = (8, 60), central_fraction: float = 0.6) -> RoiDetection:
    """Circular Hough transform summed over slices; the global maximum wins.

    Candidate centres are limited to the central ``central_fraction`` of the
    in-plane field of view.
    """
    edges = np.asarray(edge_stack, dtype=bool)
    if edges.ndim == 2:
        edges = edges[:, :, None]
    h, w = edges.shape[:2]
    lo, hi = int(radius_range[0]), int(radius_range[1])
    if not 1 <= lo <= hi or lo > max(h, w):
        raise ValueError(f"radius range {radius_range} incompatible with in-plane extents {(h, w)}")
    if not edges.any():
        raise DetectionError("no edges in any slice; cannot locate the heart")
    radii = np.arange(lo, hi + 1)
    acc = np.zeros((len(radii), h, w))
    for k in range(edges.shape[2]):
        if edges[:, :, k].any():
            acc += hough_circle(edges[:, :, k], radii)
    margin = (1.0 - central_fraction) / 2.0
    r0, r1 = int(np.floor(margin * h)), int(np.ceil((1 - margin) * h))
    c0, c1 = int(np.floor(margin * w)), int(np.ceil((1 - margin) * w))
    window = acc[:, r0:r1, c0:c1]
    if window.size == 0 or window.max() <= 0:
        raise DetectionError("Hough accumulator is empty inside the central search region")
    ri, row, col = np.unravel_index(np.argmax(window), window.shape)
    return RoiDetection((float(row + r0), float(col + c0)), float(radii[ri]), float(window[ri, row, col]))


def crop_record(source_shape, roi: RoiDetection | None, target_extent) -> CropRecord:
    offsets, padding = [], []
    for axis, (n, w) in enumerate(zip(source_shape, target_extent)):
        if n >= w:
            if axis < 2 and roi is not None:
                start = int(np.floor(roi.center[axis] - w / 2.0 + 0.5))
            else:
                start = (n - w) // 2
            offsets.append(min(max(start, 0), n - w))
            padding.append(0)
        else:
            offsets.append(0)
            padding.append((w - n) // 2)
    return CropRecord(tuple(offsets), tuple(padding), tuple(int(x) for x in target_extent), tuple(source_shape))


def crop_standardize(image, roi: RoiDetection | None, target_extent=(192, 192, 17), record: CropRecord | None = None):
    """Centre a fixed window on the ROI (clamped to the image), padding with zeros only where the image is too small.

    Returns ``(cropped, record)``; masks are cropped the same way.
    """
    if record is None:
        record = crop_record(image.shape, roi, target_extent)
    geom = image.geometry.shifted(record.start, record.extent)
    window = record.extract(np.asarray(image.array))
    if isinstance(image, SegmentationMask):
        return SegmentationMask.from_geometry(window, geom), record
    return VolumeGrid.from_geometry(window, geom), record


def zscore_normalize(image: VolumeGrid) -> tuple[VolumeGrid, tuple[float, float]]:
    """Zero mean, unit variance; near-constant images map to zeros with std recorded as 1."""
    data = np.asarray(image.voxels, dtype=np.float64)
    if data.size < 2:
        raise ValueError("need at least 2 voxels to normalise")
    mean = float(data.mean())
    std = float(data.std())
    if std < 1e-8:
        return image.with_voxels(np.zeros(data.shape, dtype=np.float32)), (mean, 1.0)
    return image.with_voxels(((data - mean) / std).astype(np.float32)), (mean, std)


@dataclass(frozen=True, eq=False)
class PreprocessedView:
    """Both phases of one view after resample -> detect -> crop -> normalise."""

    view: str
    ed: VolumeGrid
    es: VolumeGrid
    roi: RoiDetection
    crop: CropRecord
    normalization: dict
    original_geometry: Geometry
    resampled_geometry: Geometry
    masks: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {
            "view": self.view,
            "roi": self.roi.to_dict(),
            "crop": self.crop.to_dict(),
            "normalization": {k: list(v) for k, v in self.normalization.items()},
            "original_geometry": self.original_geometry.to_dict(),
            "resampled_geometry": self.resampled_geometry.to_dict(),
            "standardized_geometry": self.ed.geometry.to_dict(),
        }


def working_spacing(grid, config: RoiConfig) -> tuple[float, float, float]:
    # in-plane only; through-plane spacing is left as acquired
    return (config.inplane_spacing, config.inplane_spacing, float(grid.spacing[2]))


def preprocess_view(ed: VolumeGrid, es: VolumeGrid, view: str, config: RoiConfig | None = None,
                    masks: dict | None = None) -> PreprocessedView:
    """Full per-view preprocessing. Raises DetectionError when the heart cannot be found."""
    if view not in ("sa", "la"):
        raise ValueError(f"view must be 'sa' or 'la', got {view!r}")
    config = config or RoiConfig()
    spacing = working_spacing(ed, config)
    ed_r = resample(ed, spacing, "cubic_spline")
    es_r = resample(es, spacing, "cubic_spline")
    diff = motion_difference(ed_r, es_r).voxels
    edges = np.stack(
        [canny_edges(diff[:, :, k], config.canny_low, config.canny_high, config.canny_sigma) for k in range(diff.shape[2])],
        axis=-1,
    )
    roi = detect_heart_roi(edges, config.radius_range, config.central_fraction)
    extent = config.extent(view)
    ed_c, record = crop_standardize(ed_r, roi, extent)
    es_c, _ = crop_standardize(es_r, roi, extent, record=record)
    ed_n, ed_stats = zscore_normalize(ed_c)
    es_n, es_stats = zscore_normalize(es_c)
    out_masks = {}
    for phase, mask in (masks or {}).items():
        if mask is None:
            continue
        m_r = resample(mask, spacing, "nearest")
        out_masks[phase] = crop_standardize(m_r, roi, extent, record=record)[0]
    return PreprocessedView(
        view=view, ed=ed_n, es=es_n, roi=roi, crop=record,
        normalization={"ed": ed_stats, "es": es_stats},
        original_geometry=ed.geometry, resampled_geometry=ed_r.geometry, masks=out_masks,
    )


@dataclass(frozen=True, eq=False)
class PreprocessedCase:
    """Network-ready SA/LA pair for one phase."""

    sa: VolumeGrid
    la: VolumeGrid
    sa_crop: CropRecord
    la_crop: CropRecord
    normalization: dict
    sa_mask: SegmentationMask | None = None
    la_mask: SegmentationMask | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_views(cls, sa: PreprocessedView, la: PreprocessedView, phase: str, meta: dict | None = None):
        return cls(
            sa=sa.ed if phase == "ed" else sa.es,
            la=la.ed if phase == "ed" else la.es,
            sa_crop=sa.crop,
            la_crop=la.crop,
            normalization={"sa": sa.normalization[phase], "la": la.normalization[phase]},
            sa_mask=sa.masks.get(phase),
            la_mask=la.masks.get(phase),
            meta=dict(meta or {}, phase=phase),
        )
