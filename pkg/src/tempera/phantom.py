"""Synthetic paired SA/LA cardiac phantoms with analytic ground truth.

The scene lives in world millimetres. The LV is a tapered cylinder along
world z; the RV is a crescent hugging one side of it. The long-axis image
is a plane containing the ventricular axis, and a static torso (chest wall,
liver, spine, aorta) gives it out-of-plane structure. It is rendered through a known
misalignment affine (SA world -> LA world) so registration and the GST can
be tested against an exact answer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError
from .volume import AffineTransform, Geometry, SegmentationMask, VolumeGrid, write_volume

log = logging.getLogger(__name__)

PHASES = ("ed", "es")

# intensities, roughly bSSFP-like: bright blood, dark muscle
_BLOOD = 0.9
_MUSCLE = 0.2
_TISSUE = 0.4
_LIVER = 0.6
_BONE = 0.75


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    heart_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lv_radius: float = 25.0
    lv_wall: float = 7.0
    rv_offset: float = 27.0
    rv_radius: float = 30.0
    rv_wall: float = 3.0
    rv_extent_deg: float = 160.0
    rv_angle_deg: float = 200.0
    heart_length: float = 90.0
    rv_length_fraction: float = 0.8
    contraction: float = 0.75
    la_angle_deg: float | None = None
    sa_inplane_rotation_deg: float = 0.0
    misalignment_rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    misalignment_translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: float = 0.03
    texture: float = 0.06
    sa_shape: tuple[int, int, int] = (96, 96, 10)
    sa_spacing: tuple[float, float, float] = (2.0, 2.0, 10.0)
    la_shape: tuple[int, int] = (96, 96)
    la_spacing: tuple[float, float, float] = (2.0, 2.0, 8.0)
    dilated: bool = False

    def __post_init__(self):
        if not 0.0 < self.contraction <= 1.0:
            raise ConfigError(f"contraction must be in (0, 1], got {self.contraction}")
        positive = ("lv_radius", "lv_wall", "rv_radius", "heart_length", "rv_extent_deg")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.rv_offset + self.rv_radius <= self.lv_radius + self.lv_wall:
            raise ConfigError("RV circle lies inside the LV epicardium; crescent would be empty")
        if not 0 < self.rv_length_fraction <= 1:
            raise ConfigError("rv_length_fraction must be in (0, 1]")

    @property
    def heart_radius(self) -> float:
        """In-plane reach of the heart at ED, mm from the ventricular axis."""
        rv = self.rv_offset + self.rv_radius * (1.5 if self.dilated else 1.0) + self.rv_wall
        return max(self.lv_radius + self.lv_wall, rv)

    @property
    def misalignment(self) -> AffineTransform:
        """SA world -> LA world, rotating about the heart centre then translating."""
        rot = Rotation.from_rotvec(np.deg2rad(self.misalignment_rotation_deg)).as_matrix()
        return AffineTransform.from_linear(rot, self.misalignment_translation_mm, self.heart_center)


@dataclass(frozen=True, eq=False)
class CasePair:
    """One subject at one cardiac phase."""

    sa: VolumeGrid
    la: VolumeGrid
    transform: AffineTransform
    sa_mask: SegmentationMask | None = None
    la_mask: SegmentationMask | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PhantomCase:
    spec: PhantomSpec
    ed: CasePair
    es: CasePair

    @property
    def heart_center(self) -> np.ndarray:
        return np.asarray(self.spec.heart_center, dtype=np.float64)

    def phase(self, name: str) -> CasePair:
        return {"ed": self.ed, "es": self.es}[name]


class _Scene:
    """Analytic indicator functions for one phase of a phantom."""

    def __init__(self, spec: PhantomSpec, phase: str):
        c = spec.contraction if phase == "es" else 1.0
        self.center = np.asarray(spec.heart_center, dtype=np.float64)
        self.lv_r = spec.lv_radius * c
        # myocardium thickens as the cavity shrinks
        self.lv_wall = spec.lv_wall / np.sqrt(c)
        # the RV shortens mostly longitudinally, so its cross-section shrinks less
        self.rv_r = spec.rv_radius * np.sqrt(c) * (1.5 if spec.dilated else 1.0)
        self.rv_off = spec.rv_offset
        self.rv_wall = spec.rv_wall / np.sqrt(c)
        self.length = spec.heart_length * (0.5 + 0.5 * c)
        self.rv_len = spec.rv_length_fraction
        ang = np.deg2rad(spec.rv_angle_deg)
        self.rv_dir = np.array([np.cos(ang), np.sin(ang)])
        self.half_extent = np.deg2rad(spec.rv_extent_deg) / 2.0
        rng = np.random.default_rng([spec.seed, 11])
        # static tissue texture: a few random plane waves, fixed across phases
        wavelengths = rng.uniform(25.0, 70.0, 6)
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self.k = dirs * (2 * np.pi / wavelengths)[:, None]
        self.phi = rng.uniform(0, 2 * np.pi, 6)
        self.texture = spec.texture

    def _taper(self, z):
        # base at h=0 (flat valve plane), apex at h=1; ellipsoidal taper
        base = self.center[2] - 0.5 * self.length
        h = (z - base) / self.length
        inside = (h >= 0) & (h <= 1)
        return np.sqrt(np.clip(1.0 - h**2, 0.0, None)) * inside, h

    def labels(self, pts: np.ndarray):
        """Return (lv_blood, lv_muscle, rv_blood, rv_muscle) boolean arrays for world points."""
        d = pts - self.center
        f, h = self._taper(pts[..., 2])
        r_lv = np.hypot(d[..., 0], d[..., 1])
        lv_blood = r_lv < self.lv_r * f
        epi = self.lv_r * f + self.lv_wall * (f > 0)
        lv_muscle = (r_lv < epi) & ~lv_blood
        rv_c = self.rv_dir * self.rv_off
        r_rv = np.hypot(d[..., 0] - rv_c[0], d[..., 1] - rv_c[1])
        ang = np.arctan2(d[..., 1], d[..., 0]) - np.arctan2(self.rv_dir[1], self.rv_dir[0])
        ang = np.abs((ang + np.pi) % (2 * np.pi) - np.pi)
        in_rv_span = (h <= self.rv_len) & (f > 0) & (ang <= self.half_extent)
        rv_outer = self.rv_r * f
        rv_blood = in_rv_span & (r_rv < rv_outer) & (r_lv >= epi)
        rv_muscle = in_rv_span & (r_rv < rv_outer + self.rv_wall) & ~rv_blood & (r_lv >= epi)
        return lv_blood, lv_muscle, rv_blood, rv_muscle

    def _static_anatomy(self, d: np.ndarray, tex: np.ndarray) -> np.ndarray:
        # chest wall leans and narrows away from the heart; liver dome below the apex;
        # spine and descending aorta run obliquely behind the heart
        z = d[..., 2]
        lean = d[..., :2] - z[..., None] * np.array([0.12, -0.08])
        narrow = 1.0 - (z / 260.0) ** 2
        body = (lean[..., 0] / (95.0 * narrow)) ** 2 + (lean[..., 1] / (78.0 * narrow)) ** 2 < 1.0
        img = np.where(body, _TISSUE + tex, 0.0)
        liver = ((d - (25.0, -15.0, 85.0)) / (75.0, 60.0, 45.0)) ** 2
        img = np.where(body & (liver.sum(-1) < 1.0), _LIVER + 0.5 * tex, img)
        for base, axis, radius, value in ((( -40.0, -40.0), (0.15, 0.1), 12.0, _BONE),
                                          ((-15.0, -45.0), (-0.1, 0.2), 10.0, _BLOOD)):
            off = d[..., :2] - np.asarray(base) - z[..., None] * np.asarray(axis)
            img = np.where(body & (np.hypot(off[..., 0], off[..., 1]) < radius), value, img)
        return img

    def intensity(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        tex = self.texture * np.cos(pts @ self.k.T + self.phi).sum(-1)
        img = self._static_anatomy(d, tex)
        lv_blood, lv_muscle, rv_blood, rv_muscle = self.labels(pts)
        img = np.where(lv_muscle | rv_muscle, _MUSCLE + 0.5 * tex, img)
        img = np.where(lv_blood | rv_blood, _BLOOD + 0.3 * tex, img)
        return img


def _lattice_points(geom: Geometry) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in geom.shape], indexing="ij"), axis=-1)
    return geom.voxel_to_world(idx.astype(np.float64))


def sa_geometry(spec: PhantomSpec) -> Geometry:
    rot = Rotation.from_euler("z", spec.sa_inplane_rotation_deg, degrees=True).as_matrix()
    shape = np.asarray(spec.sa_shape)
    spacing = np.asarray(spec.sa_spacing, dtype=np.float64)
    # centre the slab on the heart in-plane, and on the ventricles' mid level
    origin = np.asarray(spec.heart_center) - rot @ ((shape - 1) / 2.0 * spacing)
    return Geometry(tuple(spec.sa_shape), spacing, origin, rot)


def la_geometry(spec: PhantomSpec) -> Geometry:
    angle = np.deg2rad(spec.rv_angle_deg if spec.la_angle_deg is None else spec.la_angle_deg)
    ax0 = np.array([0.0, 0.0, 1.0])
    ax1 = np.array([np.cos(angle), np.sin(angle), 0.0])
    direction = np.stack([ax0, ax1, np.cross(ax0, ax1)], axis=1)
    shape = (spec.la_shape[0], spec.la_shape[1], 1)
    spacing = np.asarray(spec.la_spacing, dtype=np.float64)
    half = (np.asarray(shape) - 1) / 2.0 * spacing
    origin = np.asarray(spec.heart_center) - direction @ half
    return Geometry(shape, spacing, origin, direction)


def rasterize_rv(spec: PhantomSpec, geom: Geometry, phase: str, misalignment: AffineTransform | None = None,
                 supersample: int = 1) -> np.ndarray:
    """RV indicator on ``geom``; with ``supersample`` > 1 the majority over sub-voxel samples."""
    scene = _Scene(spec, phase)
    pts = _lattice_points(geom)
    inv = None if misalignment is None else misalignment.inverse()
    if supersample == 1:
        p = pts if inv is None else inv.apply(pts)
        return scene.labels(p)[2]
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    acc = np.zeros(geom.shape)
    n = 0
    axes = [offs if geom.shape[k] > 1 or k < 2 else np.zeros(1) for k in range(3)]
    for a in axes[0]:
        for b in axes[1]:
            for c in axes[2]:
                sub = pts + (np.array([a, b, c]) * geom.spacing) @ geom.direction.T
                p = sub if inv is None else inv.apply(sub)
                acc += scene.labels(p)[2]
                n += 1
    return acc / n >= 0.5


def generate_case(spec: PhantomSpec) -> PhantomCase:
    """Render ED and ES SA stacks plus LA slices, with masks and the exact SA->LA affine."""
    sa_geom = sa_geometry(spec)
    la_geom = la_geometry(spec)
    mis = spec.misalignment
    sa_pts = _lattice_points(sa_geom)
    la_pts_sa_world = mis.inverse().apply(_lattice_points(la_geom))
    rng = np.random.default_rng([spec.seed, 23])
    # one noise field per view, shared by both phases so ED-ES differences are pure motion
    sa_noise = rng.normal(0.0, spec.noise, sa_geom.shape)
    la_noise = rng.normal(0.0, spec.noise, la_geom.shape)
    pairs = {}
    for phase in PHASES:
        scene = _Scene(spec, phase)
        sa_img = (scene.intensity(sa_pts) + sa_noise).astype(np.float32)
        la_img = (scene.intensity(la_pts_sa_world) + la_noise).astype(np.float32)
        sa_rv = scene.labels(sa_pts)[2]
        la_rv = scene.labels(la_pts_sa_world)[2]
        pairs[phase] = CasePair(
            sa=VolumeGrid.from_geometry(sa_img, sa_geom),
            la=VolumeGrid.from_geometry(la_img, la_geom),
            transform=mis,
            sa_mask=SegmentationMask.from_geometry(sa_rv.astype(np.uint8), sa_geom),
            la_mask=SegmentationMask.from_geometry(la_rv.astype(np.uint8), la_geom),
            meta={"phase": phase, "seed": spec.seed, "dilated": spec.dilated},
        )
    return PhantomCase(spec, pairs["ed"], pairs["es"])


def random_spec(rng: np.random.Generator, base: PhantomSpec, seed: int, dilated: bool = False,
                max_rotation_deg: float = 5.0, max_translation_mm: float = 5.0) -> PhantomSpec:
    """Randomised anatomy: sizes +-30%, positions +-10 mm, orientations +-20 deg."""
    size = rng.uniform(0.7, 1.3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    trans_dir = rng.normal(size=3)
    trans_dir /= np.linalg.norm(trans_dir)
    rv_angle = base.rv_angle_deg + rng.uniform(-20, 20)
    return replace(
        base,
        seed=seed,
        heart_center=tuple(np.asarray(base.heart_center) + rng.uniform(-10, 10, 3) * (1, 1, 0.5)),
        lv_radius=base.lv_radius * size * rng.uniform(0.9, 1.1),
        lv_wall=base.lv_wall * size,
        rv_offset=base.rv_offset * size,
        rv_radius=base.rv_radius * size * rng.uniform(0.9, 1.1),
        rv_angle_deg=rv_angle,
        la_angle_deg=rv_angle + rng.uniform(-20, 20),
        sa_inplane_rotation_deg=rng.uniform(-20, 20),
        contraction=rng.uniform(0.65, 0.85),
        misalignment_rotation_deg=tuple(axis * rng.uniform(0, max_rotation_deg)),
        misalignment_translation_mm=tuple(trans_dir * rng.uniform(0, max_translation_mm)),
        dilated=dilated,
    )


def generate_dataset(n: int, base_spec: PhantomSpec | None = None, seed: int = 0, dilated_every: int = 10,
                     max_rotation_deg: float = 5.0, max_translation_mm: float = 5.0) -> list[PhantomCase]:
    """``n`` randomised phantoms; every ``dilated_every``-th (offset 3) has a 1.5x RV, and at least two do when n >= 2."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    base = base_spec or PhantomSpec()
    rng = np.random.default_rng(seed)
    dilated = {i for i in range(n) if i % dilated_every == 3}
    # guarantee a couple of dilated-RV cases in any dataset big enough to hold them
    for i in range(n - 1, -1, -1):
        if n < 5 or len(dilated) >= 2:
            break
        dilated.add(i)
    cases = []
    for i in range(n):
        spec = random_spec(rng, base, seed=int(rng.integers(1 << 31)), dilated=i in dilated,
                           max_rotation_deg=max_rotation_deg, max_translation_mm=max_translation_mm)
        cases.append(generate_case(spec))
    return cases


def case_files(case_dir: Path) -> dict[str, Path]:
    names = {}
    for phase in PHASES:
        for view in ("sa", "la"):
            names[f"{view}_{phase}"] = case_dir / f"{view}_{phase}.nii.gz"
            names[f"{view}_{phase}_gt"] = case_dir / f"{view}_{phase}_gt.nii.gz"
    names["transform"] = case_dir / "transform.json"
    names["spec"] = case_dir / "phantom.json"
    return names


def write_case(case: PhantomCase, case_dir) -> Path:
    case_dir = Path(case_dir)
    files = case_files(case_dir)
    for phase in PHASES:
        pair = case.phase(phase)
        write_volume(pair.sa, files[f"sa_{phase}"])
        write_volume(pair.la, files[f"la_{phase}"])
        write_volume(pair.sa_mask, files[f"sa_{phase}_gt"])
        write_volume(pair.la_mask, files[f"la_{phase}_gt"])
    files["transform"].write_text(json.dumps({**case.ed.transform.to_dict(), "source": "phantom", "levels": []}, indent=2))
    files["spec"].write_text(json.dumps(asdict(case.spec), indent=2))
    return case_dir


def write_dataset(cases: list[PhantomCase], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    dirs = []
    for i, case in enumerate(cases):
        dirs.append(write_case(case, out_dir / f"case_{i:03d}"))
    log.info("wrote %d phantom cases to %s", len(cases), out_dir)
    return dirs
