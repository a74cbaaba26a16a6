"""In-memory building blocks shared by the CLI stages and the end-to-end tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .gst import GstLayer, build_context
from .metrics import CaseMetrics, case_metrics
from .network import TemperaNet, predict
from .phantom import PHASES
from .postprocess import PostprocessConfig, postprocess_mask
from .registration import RegistrationConfig, RegistrationResult, register_affine
from .roi import PreprocessedCase, PreprocessedView, RoiConfig, preprocess_view, working_spacing
from .training import TrainingCase
from .volume import AffineTransform, SegmentationMask, VolumeGrid, resample

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CaseViews:
    case_id: str
    sa: PreprocessedView
    la: PreprocessedView

    def phase(self, phase: str, meta: dict | None = None) -> PreprocessedCase:
        return PreprocessedCase.from_views(self.sa, self.la, phase, dict(meta or {}, case_id=self.case_id))


def preprocess_case(case_id: str, images: dict, masks: dict | None = None, config: RoiConfig | None = None) -> CaseViews:
    """``images`` maps ``sa_ed``, ``sa_es``, ``la_ed``, ``la_es`` to grids; ``masks`` uses the same keys."""
    masks = masks or {}
    views = {}
    for view in ("sa", "la"):
        views[view] = preprocess_view(
            images[f"{view}_ed"], images[f"{view}_es"], view, config,
            masks={p: masks.get(f"{view}_{p}") for p in PHASES},
        )
    return CaseViews(case_id, views["sa"], views["la"])


def register_case(sa_ed: VolumeGrid, la_ed: VolumeGrid, roi_config: RoiConfig | None = None,
                  config: RegistrationConfig | None = None) -> RegistrationResult:
    """MI registration on the working-spacing, uncropped ED volumes."""
    roi_config = roi_config or RoiConfig()
    sa = resample(sa_ed, working_spacing(sa_ed, roi_config), "cubic_spline")
    la = resample(la_ed, working_spacing(la_ed, roi_config), "cubic_spline")
    return register_affine(sa, la, config=config)


def training_cases(views: CaseViews, transform: AffineTransform, phases=PHASES) -> list[TrainingCase]:
    return [TrainingCase(f"{views.case_id}_{p}", views.phase(p), transform) for p in phases]


def gst_for(case: PreprocessedCase, transform: AffineTransform) -> GstLayer:
    return GstLayer(build_context(transform, case.sa.geometry, case.la.geometry))


@dataclass(frozen=True, eq=False)
class CasePrediction:
    case_id: str
    phase: str
    sa_raw: SegmentationMask
    la_raw: SegmentationMask
    sa: SegmentationMask
    la: SegmentationMask


def predict_case(net: TemperaNet, views: CaseViews, transform: AffineTransform, phase: str,
                 config: PostprocessConfig | None = None) -> CasePrediction:
    """Threshold, clean up and project back to the acquisition grids."""
    config = config or PostprocessConfig()
    case = views.phase(phase)
    sa_raw, la_raw = predict(net, case.sa, case.la, gst_for(case, transform), config.threshold)
    out = {}
    for view, raw in (("sa", sa_raw), ("la", la_raw)):
        pv = getattr(views, view)
        out[view] = postprocess_mask(raw, pv.crop, pv.resampled_geometry, pv.original_geometry, config)
    return CasePrediction(views.case_id, phase, sa_raw, la_raw, out["sa"], out["la"])


def evaluate_prediction(pred: CasePrediction, sa_truth: SegmentationMask, la_truth: SegmentationMask) -> CaseMetrics:
    return case_metrics(f"{pred.case_id}_{pred.phase}", pred.sa, sa_truth, pred.la, la_truth)


def failed_case(case_id: str, reason: str) -> CaseMetrics:
    return case_metrics(case_id, None, None, None, None, failed=True, reason=reason)


def set_threads(n: int | None = 1) -> None:
    """Pin torch to a fixed thread count so reductions happen in a fixed order."""
    if n is not None:
        torch.set_num_threads(n)

