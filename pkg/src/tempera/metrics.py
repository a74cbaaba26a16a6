"""Evaluation metrics (Dice, Hausdorff in mm) and the per-case report."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import GeometryError
from .volume import SegmentationMask


def _labels(mask) -> np.ndarray:
    return np.asarray(mask.labels if isinstance(mask, SegmentationMask) else mask).astype(bool)


def _check_pair(pred, truth):
    if isinstance(pred, SegmentationMask) and isinstance(truth, SegmentationMask):
        bad = pred.geometry.mismatch(truth.geometry)
        if bad is not None:
            raise GeometryError(f"masks differ in {bad}")
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise GeometryError(f"masks differ in shape: {p.shape} vs {t.shape}")
    return p, t


def dice_score(pred, truth) -> float:
    """2|P & T| / (|P| + |T|); 1 when both are empty."""
    p, t = _check_pair(pred, truth)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face neighbour outside the mask; singleton axes are ignored."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    flat_axes = [a for a, n in enumerate(mask.shape) if n == 1]
    if flat_axes:
        sl = [slice(None)] * mask.ndim
        for a in flat_axes:
            sl[a] = slice(1, 2)
        structure = structure[tuple(sl)]
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def _directed_sq(a: np.ndarray, b: np.ndarray) -> float:
    _, idx = cKDTree(b).query(a)
    d = a - b[idx]
    return float(np.max(np.sum(d * d, axis=1)))


def hausdorff_mm(pred: SegmentationMask, truth: SegmentationMask) -> float:
    """Symmetric Hausdorff distance between boundary voxel centres in world mm; NaN if either is empty."""
    p, t = _check_pair(pred, truth)
    if not p.any() or not t.any():
        return math.nan
    geom = truth.geometry
    a = geom.voxel_to_world(np.argwhere(boundary(p)).astype(np.float64))
    b = geom.voxel_to_world(np.argwhere(boundary(t)).astype(np.float64))
    return math.sqrt(max(_directed_sq(a, b), _directed_sq(b, a)))


@dataclass
class CaseMetrics:
    case_id: str
    sa_dice: float
    la_dice: float
    sa_hausdorff_mm: float
    la_hausdorff_mm: float
    failed: bool = False
    reason: str = ""


def case_metrics(case_id: str, sa_pred, sa_truth, la_pred, la_truth, failed: bool = False, reason: str = "") -> CaseMetrics:
    """Score one case; empty predictions are flagged as failures."""
    if failed:
        return CaseMetrics(case_id, 0.0, 0.0, math.nan, math.nan, True, reason)
    empty = [v for v, m in (("sa", sa_pred), ("la", la_pred)) if not _labels(m).any()]
    if empty:
        failed, reason = True, "empty prediction: " + ",".join(empty)
    return CaseMetrics(case_id, dice_score(sa_pred, sa_truth), dice_score(la_pred, la_truth),
                       hausdorff_mm(sa_pred, sa_truth), hausdorff_mm(la_pred, la_truth), failed, reason)


def _mean_std(values) -> dict:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return {"mean": math.nan, "std": math.nan, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


METRIC_FIELDS = ("sa_dice", "la_dice", "sa_hausdorff_mm", "la_hausdorff_mm")


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)

    def aggregate(self, include_failures: bool = True) -> dict:
        rows = [c for c in self.cases if include_failures or not c.failed]
        return {name: _mean_std(getattr(c, name) for c in rows) for name in METRIC_FIELDS}

    def summary(self) -> dict:
        return {
            "testing": self.aggregate(True),
            "testing_no_failures": self.aggregate(False),
            "n_cases": len(self.cases),
            "n_failed": sum(c.failed for c in self.cases),
        }

    def to_rows(self) -> list[dict]:
        return [asdict(c) for c in self.cases]

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(CaseMetrics.__dataclass_fields__))
            writer.writeheader()
            writer.writerows(self.to_rows())
        json_path = out_dir / "metrics.json"
        json_path.write_text(json.dumps(self.summary(), indent=2))
        return csv_path, json_path

    @classmethod
    def read(cls, out_dir) -> "MetricsReport":
        cases = []
        with (Path(out_dir) / "metrics.csv").open() as fh:
            for row in csv.DictReader(fh):
                cases.append(CaseMetrics(
                    row["case_id"], *(float(row[k]) for k in METRIC_FIELDS),
                    failed=row["failed"] == "True", reason=row["reason"]))
        return cls(cases)

    @staticmethod
    def format_aggregate(agg: dict) -> dict:
        """Human-readable ``mean ± std`` strings."""
        return {k: f"{v['mean']:.3f} ± {v['std']:.3f}" for k, v in agg.items()}
