"""Mask clean-up and back-projection to the acquisition grid."""
from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from .errors import GeometryError
from .roi import CropRecord
from .volume import Geometry, SegmentationMask, resample_onto


class PostprocessConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    threshold: float = 0.5
    largest_component: bool = True
    median: bool = True
    # "before" smooths on the standardized grid, "after" on the original grid
    median_order: Literal["before", "after"] = "before"


def _structure(labels: np.ndarray, connectivity: int | None) -> np.ndarray:
    if connectivity is None:
        connectivity = 8 if labels.shape[2] == 1 else 26
    if connectivity == 26:
        return np.ones((3, 3, 3), bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 8:
        s = np.zeros((3, 3, 3), bool)
        s[:, :, 1] = True
        return s
    if connectivity == 4:
        s = np.zeros((3, 3, 3), bool)
        s[:, :, 1] = ndimage.generate_binary_structure(2, 1)
        return s
    raise ValueError(f"connectivity must be one of 4, 6, 8, 26; got {connectivity}")


def components(mask: SegmentationMask, connectivity: int | None = None) -> tuple[np.ndarray, int]:
    return ndimage.label(mask.labels, structure=_structure(mask.labels, connectivity))


def largest_component(mask: SegmentationMask, connectivity: int | None = None) -> SegmentationMask:
    """Keep only the largest foreground component (26-connected in 3D, 8-connected in-plane by default).

    Labels are numbered in C scan order, i.e. by each component's lexicographically
    first (row, col, slice) voxel, so argmax's first hit breaks ties toward the lowest seed.
    """
    labels, n = components(mask, connectivity)
    if n <= 1:
        return mask.with_labels(mask.labels.copy())
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return mask.with_labels((labels == keep).astype(np.uint8))


def median_smooth(mask: SegmentationMask, window=None) -> SegmentationMask:
    """Voxelwise median (majority vote) over ``window``; 3x3x3, or 3x3 for single-slice masks."""
    if window is None:
        window = (3, 3, 1) if mask.shape[2] == 1 else (3, 3, 3)
    window = tuple(int(w) for w in window)
    if len(window) != 3 or any(w < 1 or w % 2 == 0 for w in window):
        raise ValueError(f"median window must be three odd sizes, got {window}")
    out = ndimage.median_filter(mask.labels, size=window, mode="nearest")
    return mask.with_labels((out > 0).astype(np.uint8))


def uncrop(mask: SegmentationMask, crop: CropRecord, resampled_geometry: Geometry) -> SegmentationMask:
    if tuple(crop.source_shape) != resampled_geometry.shape:
        raise GeometryError(f"crop source {crop.source_shape} does not match resampled grid {resampled_geometry.shape}")
    if mask.shape != tuple(crop.extent):
        raise GeometryError(f"mask extents {mask.shape} do not match crop extent {crop.extent}")
    expected = resampled_geometry.shifted(crop.start, crop.extent)
    bad = expected.mismatch(mask.geometry)
    if bad is not None:
        raise GeometryError(f"mask geometry is not the crop window of the resampled grid ({bad})")
    return SegmentationMask.from_geometry(crop.insert(mask.labels), resampled_geometry)


def to_original_space(mask: SegmentationMask, crop: CropRecord, resampled_geometry: Geometry,
                      original_geometry: Geometry) -> SegmentationMask:
    """Un-crop onto the resampled grid, then nearest-neighbour back to the acquisition grid."""
    full = uncrop(mask, crop, resampled_geometry)
    return resample_onto(full, original_geometry, None, "nearest")


def postprocess_mask(mask: SegmentationMask, crop: CropRecord, resampled_geometry: Geometry,
                     original_geometry: Geometry, config: PostprocessConfig | None = None) -> SegmentationMask:
    """largest_component -> median_smooth -> to_original_space (median after, if configured).

    The component filter runs once more on the final grid because smoothing and
    nearest-neighbour back-projection can split a thin structure.
    """
    config = config or PostprocessConfig()
    out = largest_component(mask) if config.largest_component else mask
    if config.median and config.median_order == "before":
        out = median_smooth(out)
    out = to_original_space(out, crop, resampled_geometry, original_geometry)
    if config.median and config.median_order == "after":
        out = median_smooth(out)
    if config.largest_component:
        out = largest_component(out)
    return out
