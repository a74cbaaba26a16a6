"""SA -> LA affine registration: metadata pre-alignment refined by coarse-to-fine
mutual-information maximisation.

The LA image is a depth-1 volume, so the metric is evaluated on the LA
lattice with the SA volume resampled onto it through the candidate
transform. Only voxels whose SA sample falls inside the SA volume count.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import GeometryError
from .volume import AffineTransform, Geometry, VolumeGrid

log = logging.getLogger(__name__)

N_PARAMS = 12
PARAM_NAMES = ("rot_x", "rot_y", "rot_z", "tx", "ty", "tz", "scale_x", "scale_y", "scale_z", "shear_xy", "shear_xz", "shear_yz")


class RegistrationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigmas: tuple[float, ...] = (4.0, 2.0, 1.0, 0.0)
    bins: int = Field(32, ge=2)
    evals_per_param: int = Field(50, ge=1)
    rotation_step_deg: float = Field(2.0, gt=0)
    translation_step_mm: float = Field(2.0, gt=0)
    scale_shear_step: float = Field(0.02, gt=0)
    min_rotation_step_deg: float = Field(0.1, gt=0)
    min_translation_step_mm: float = Field(0.1, gt=0)
    min_scale_shear_step: float = Field(0.001, gt=0)
    # scale/shear are released only on this many finest levels; a single LA
    # plane constrains them weakly and they otherwise trade off against rotation
    affine_levels: int = Field(1, ge=0)
    seed: int = 0

    @field_validator("sigmas")
    @classmethod
    def _non_increasing(cls, v):
        if not v:
            raise ValueError("schedule must have at least one level")
        if any(s < 0 for s in v) or any(b > a for a, b in zip(v, v[1:])):
            raise ValueError("schedule sigmas must be non-negative and non-increasing")
        return tuple(float(s) for s in v)

    def initial_steps(self) -> np.ndarray:
        return np.array([self.rotation_step_deg] * 3 + [self.translation_step_mm] * 3 + [self.scale_shear_step] * 6)

    def min_steps(self) -> np.ndarray:
        return np.array([self.min_rotation_step_deg] * 3 + [self.min_translation_step_mm] * 3 + [self.min_scale_shear_step] * 6)


class MIResult(NamedTuple):
    score: float
    degenerate: bool


@dataclass(frozen=True)
class LevelTrace:
    sigma: float
    iterations: int
    initial_mi: float
    final_mi: float


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: AffineTransform
    final_mi: float
    initial_mi: float
    levels: list[LevelTrace] = field(default_factory=list)
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            **self.transform.to_dict(),
            "final_mi": self.final_mi,
            "initial_mi": self.initial_mi,
            "levels": [vars(lv) for lv in self.levels],
            "warning": self.warning,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def load_transform(path) -> AffineTransform:
    """Read the 4x4 row-major matrix from a transform.json."""
    return AffineTransform.from_dict(json.loads(Path(path).read_text()))


def prealign_from_metadata(sa: VolumeGrid | Geometry, la: VolumeGrid | Geometry) -> AffineTransform:
    """Initial SA-world -> LA-world transform implied by the file headers.

    Both headers place their voxels in the same scanner frame, so once each
    grid's own voxel->world geometry is honoured there is nothing left to
    compose: the metadata-level estimate is the identity in world space.
    Headers are validated so degenerate geometry fails here rather than
    inside the optimiser.
    """
    for name, g in (("sa", sa), ("la", la)):
        geom = g if isinstance(g, Geometry) else g.geometry
        if abs(np.linalg.det(geom.affine[:3, :3])) <= 1e-9:
            raise GeometryError(f"{name} geometry has a degenerate voxel->world matrix")
    return AffineTransform.identity()


def _bin_index(x: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.intp)
    idx = ((x - lo) * (bins / (hi - lo))).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def mutual_information_arrays(a: np.ndarray, b: np.ndarray, bins: int = 32, mask: np.ndarray | None = None,
                              ranges: Sequence[tuple[float, float]] | None = None) -> MIResult:
    """MI (nats) of two equally-shaped arrays from a ``bins x bins`` joint histogram."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"inputs differ in size: {a.size} vs {b.size}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        a, b = a[keep], b[keep]
    if a.size == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return MIResult(0.0, True)
    (alo, ahi), (blo, bhi) = ranges if ranges is not None else ((a.min(), a.max()), (b.min(), b.max()))
    ia = _bin_index(a, alo, ahi, bins)
    ib = _bin_index(b, blo, bhi, bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins).astype(np.float64)
    return MIResult(_mi_from_joint(joint), False)


def _mi_from_joint(joint: np.ndarray) -> float:
    p = joint / joint.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(pa, pb)
    # symmetric accumulation order so MI(a, b) == MI(b, a) to rounding
    mi = float(np.sum(p[nz] * (np.log(p[nz]) - np.log(outer[nz]))))
    return max(mi, 0.0)


def mutual_information(a: VolumeGrid, b: VolumeGrid, bins: int = 32, mask=None) -> MIResult:
    """MI between two volumes already sampled on a common grid."""
    if a.shape != b.shape:
        raise ValueError(f"volumes must share a grid: {a.shape} vs {b.shape}")
    return mutual_information_arrays(a.voxels, b.voxels, bins, mask)


def params_to_affine(params: np.ndarray, center: np.ndarray) -> np.ndarray:
    """12-parameter update about ``center``: rotation (deg), translation (mm), scale, shear."""
    rot = Rotation.from_euler("xyz", params[0:3], degrees=True).as_matrix()
    scale = np.diag(1.0 + params[6:9])
    shear = np.eye(3)
    shear[0, 1], shear[0, 2], shear[1, 2] = params[9:12]
    lin = rot @ scale @ shear
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = center - lin @ center + params[3:6]
    return m


class _Metric:
    """MI of the (blurred) LA image against the SA volume pulled through a candidate transform."""

    def __init__(self, sa: VolumeGrid, la: VolumeGrid, sigma_mm: float, bins: int):
        self.sa_geom = sa.geometry
        sa_data = np.asarray(sa.voxels, dtype=np.float64)
        la_data = np.asarray(la.voxels, dtype=np.float64)
        if sigma_mm > 0:
            sa_data = ndimage.gaussian_filter(sa_data, sigma_mm / sa.spacing, mode="nearest")
            la_sig = np.where(np.asarray(la.shape) > 1, sigma_mm / la.spacing, 0.0)
            la_data = ndimage.gaussian_filter(la_data, la_sig, mode="nearest")
        self.sa = sa_data
        self.la = la_data.ravel()
        self.bins = bins
        self.ranges = ((sa_data.min(), sa_data.max()), (la_data.min(), la_data.max()))
        la_geom = la.geometry
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in la_geom.shape], indexing="ij"), -1).reshape(-1, 3)
        self.la_world_h = np.c_[la_geom.voxel_to_world(idx.astype(np.float64)), np.ones(len(idx))]
        self.la_bins = _bin_index(self.la, *self.ranges[1], bins)
        self.upper = np.asarray(self.sa_geom.shape, dtype=np.float64) - 1

    def __call__(self, transform: np.ndarray) -> float:
        m = self.sa_geom.inverse_affine @ np.linalg.inv(transform)
        coords = (self.la_world_h @ m.T)[:, :3]
        inside = np.all((coords >= 0) & (coords <= self.upper), axis=1)
        if inside.sum() < 16:
            return 0.0
        c = coords[inside].T
        vals = ndimage.map_coordinates(self.sa, c, order=1, mode="nearest")
        ia = _bin_index(vals, *self.ranges[0], self.bins)
        joint = np.bincount(ia * self.bins + self.la_bins[inside], minlength=self.bins**2)
        return _mi_from_joint(joint.reshape(self.bins, self.bins).astype(np.float64))


def _coordinate_descent(metric: _Metric, init: np.ndarray, center: np.ndarray, params: np.ndarray,
                        config: RegistrationConfig, rng: np.random.Generator, active: np.ndarray):
    steps = config.initial_steps()
    mins = config.min_steps()
    # inactive parameters start below their floor and are never visited
    steps[~active] = 0.0
    budget = config.evals_per_param * int(active.sum())

    def score(p):
        return metric(params_to_affine(p, center) @ init)

    best = score(params)
    start = best
    evals = 0
    while evals < budget and np.any(steps >= mins):
        for k in rng.permutation(N_PARAMS):
            if steps[k] < mins[k] or evals >= budget:
                continue
            moved = False
            for sign in (1.0, -1.0):
                trial = params.copy()
                trial[k] += sign * steps[k]
                s = score(trial)
                evals += 1
                if s > best:
                    params, best, moved = trial, s, True
                    break
            if not moved:
                steps[k] *= 0.5
    return params, start, best, evals


def register_affine(sa: VolumeGrid, la: VolumeGrid, init: AffineTransform | None = None,
                    config: RegistrationConfig | None = None, schedule: Sequence[float] | None = None) -> RegistrationResult:
    """Refine ``init`` (SA world -> LA world) by maximising MI, one blur level at a time.

    Each level starts from the previous optimum and searches the six rigid
    parameters first; the finest ``affine_levels`` levels then search all
    twelve. Never returns a transform
    scoring below ``init`` at the finest level; in that case (or if no level
    improves) ``init`` comes back with a warning.
    """
    config = config or RegistrationConfig()
    if schedule is not None:
        config = config.model_copy(update={"sigmas": RegistrationConfig(sigmas=tuple(schedule)).sigmas})
    init = init or prealign_from_metadata(sa, la)
    init_m = init.matrix
    center = la.geometry.center_world()
    rng = np.random.default_rng(config.seed)
    params = np.zeros(N_PARAMS)
    rigid = np.arange(N_PARAMS) < 6
    n_levels = len(config.sigmas)
    levels = []
    for i, sigma in enumerate(config.sigmas):
        metric = _Metric(sa, la, sigma, config.bins)
        params, start, best, evals = _coordinate_descent(metric, init_m, center, params, config, rng, rigid)
        if i >= n_levels - config.affine_levels:
            params, _, best, more = _coordinate_descent(metric, init_m, center, params, config, rng,
                                                        np.ones(N_PARAMS, bool))
            evals += more
        levels.append(LevelTrace(float(sigma), int(evals), float(start), float(best)))
        log.debug("level sigma=%.2f: MI %.4f -> %.4f in %d evals", sigma, start, best, evals)
    final_metric = _Metric(sa, la, config.sigmas[-1], config.bins)
    initial_mi = final_metric(init_m)
    final = params_to_affine(params, center) @ init_m
    final_mi = final_metric(final)
    warning = None
    if all(lv.final_mi <= lv.initial_mi for lv in levels):
        warning = "optimiser did not improve MI at any level; returning the initial transform"
    elif final_mi < initial_mi:
        warning = "refined transform scores below the initial one; returning the initial transform"
    if warning:
        log.warning(warning)
        return RegistrationResult(init, initial_mi, initial_mi, levels, warning)
    final[3] = (0.0, 0.0, 0.0, 1.0)
    return RegistrationResult(AffineTransform(final), final_mi, initial_mi, levels)


def rotation_error_deg(estimate: AffineTransform, truth: AffineTransform) -> float:
    """Angle of the rotation part (polar factor) of ``estimate`` composed with ``truth``^-1."""
    resid = estimate.linear @ np.linalg.inv(truth.linear)
    u, _, vt = np.linalg.svd(resid)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1
        rot = u @ vt
    return float(np.degrees(Rotation.from_matrix(rot).magnitude()))


def translation_error_mm(estimate: AffineTransform, truth: AffineTransform, point) -> float:
    """Distance between where the two transforms send ``point``."""
    return float(np.linalg.norm(estimate.apply(point) - truth.apply(point)))
