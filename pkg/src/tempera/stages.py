"""On-disk pipeline stages.

Layout under ``paths.output_root``::

    preprocess/<case>/{sa,la}_{ed,es}.nii.gz   standardized images
    preprocess/<case>/{sa,la}_{ed,es}_gt.nii.gz standardized masks (when ground truth exists)
    preprocess/<case>/{sa,la}.json              crop/normalization/roi sidecars
    preprocess/<case>/status.json               {"failed": bool, "reason": str}
    register/<case>/transform.json
    train/epoch_XXXX.npz, train/final.npz, train/history.json
    predict/<case>/{sa,la}_<phase>.nii.gz       acquisition-grid masks
    predict/<case>/{sa,la}_<phase>_std.nii.gz   thresholded network output before clean-up
    evaluate/metrics.{csv,json}
    report/<case>_<phase>.png, report/index.json

Every stage directory also receives ``config.yaml``, the effective configuration.
"""
from __future__ import annotations

import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, echo_config
from .errors import DetectionError, MissingArtifactError
from .metrics import MetricsReport, case_metrics
from .phantom import PHASES, case_files, generate_dataset, write_dataset
from .pipeline import CaseViews, predict_case, preprocess_case, register_case, set_threads, training_cases
from .roi import CropRecord, PreprocessedView, RoiDetection
from .training import load_checkpoint, load_network, save_checkpoint, train
from .volume import Geometry, read_mask, read_volume, write_volume
from .registration import load_transform

log = logging.getLogger(__name__)

VIEWS = ("sa", "la")
EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_ALL_FAILED = 0, 1, 2, 3
COMMANDS = ("phantom", "preprocess", "register", "train", "predict", "evaluate", "report")


def require(path: Path, hint: str = "") -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"missing {path}" + (f"; {hint}" if hint else ""))
    return Path(path)


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_json(path: Path, hint: str = "") -> dict:
    return json.loads(require(path, hint).read_text())


def discover_cases(data_root) -> list[str]:
    root = require(Path(data_root), "run the phantom command or point paths.data_root at a dataset")
    ids = sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "sa_ed.nii.gz").exists())
    if not ids:
        raise MissingArtifactError(f"no case directories with sa_ed.nii.gz under {root}")
    return ids


def split_cases(config: PipelineConfig, ids: list[str]) -> tuple[list[str], list[str]]:
    if config.test_cases == 0:
        return ids, ids
    if config.test_cases >= len(ids):
        raise MissingArtifactError(f"{len(ids)} cases cannot hold out {config.test_cases} for testing")
    return ids[: -config.test_cases], ids[-config.test_cases:]


def parallel_map(fn, args: list, workers: int) -> list:
    """Ordered map; results come back in input order whatever the worker count."""
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(min(workers, len(args)), mp_context=multiprocessing.get_context("spawn")) as pool:
        return list(pool.map(fn, *zip(*args)))


# ----------------------------------------------------------------------------- phantom


def run_phantom(config: PipelineConfig, out=None, n=None) -> int:
    out = Path(out or config.paths.data_root)
    cases = generate_dataset(n or config.phantom.n, seed=config.seed, dilated_every=config.phantom.dilated_every)
    write_dataset(cases, out)
    echo_config(config, out)
    return EXIT_OK


# ----------------------------------------------------------------------------- preprocess


def write_view(pv: PreprocessedView, out_dir: Path) -> None:
    for phase in PHASES:
        write_volume(getattr(pv, phase), out_dir / f"{pv.view}_{phase}.nii.gz")
        if phase in pv.masks:
            write_volume(pv.masks[phase], out_dir / f"{pv.view}_{phase}_gt.nii.gz")
    write_json(out_dir / f"{pv.view}.json", pv.sidecar())


def read_view(case_dir: Path, view: str) -> PreprocessedView:
    meta = read_json(case_dir / f"{view}.json", "run the preprocess command first")
    images = {p: read_volume(require(case_dir / f"{view}_{p}.nii.gz")) for p in PHASES}
    masks = {p: read_mask(case_dir / f"{view}_{p}_gt.nii.gz") for p in PHASES
             if (case_dir / f"{view}_{p}_gt.nii.gz").exists()}
    return PreprocessedView(
        view=view, ed=images["ed"], es=images["es"],
        roi=RoiDetection.from_dict(meta["roi"]),
        crop=CropRecord.from_dict(meta["crop"]),
        normalization={k: tuple(v) for k, v in meta["normalization"].items()},
        original_geometry=Geometry.from_dict(meta["original_geometry"]),
        resampled_geometry=Geometry.from_dict(meta["resampled_geometry"]),
        masks=masks,
    )


def read_case_views(case_dir: Path) -> CaseViews:
    return CaseViews(case_dir.name, read_view(case_dir, "sa"), read_view(case_dir, "la"))


def _preprocess_one(case_dir: Path, out_dir: Path, config: PipelineConfig) -> dict:
    set_threads(config.threads)
    files = case_files(case_dir)
    images = {k: read_volume(require(files[k])) for k in ("sa_ed", "sa_es", "la_ed", "la_es")}
    masks = {k: read_mask(files[f"{k}_gt"]) for k in images if files[f"{k}_gt"].exists()}
    status = {"case_id": case_dir.name, "failed": False, "reason": ""}
    try:
        views = preprocess_case(case_dir.name, images, masks, config.roi)
    except DetectionError as exc:
        log.warning("%s: heart detection failed: %s", case_dir.name, exc)
        status.update(failed=True, reason=f"detection failed: {exc}")
    else:
        write_view(views.sa, out_dir)
        write_view(views.la, out_dir)
    write_json(out_dir / "status.json", status)
    return status


def run_preprocess(config: PipelineConfig) -> int:
    root = Path(config.paths.data_root)
    stage = config.stage_dir("preprocess")
    echo_config(config, stage)
    ids = discover_cases(root)
    statuses = parallel_map(_preprocess_one, [(root / i, stage / i, config) for i in ids], config.workers)
    write_json(stage / "summary.json", statuses)
    return EXIT_ALL_FAILED if all(s["failed"] for s in statuses) else EXIT_OK


def case_status(config: PipelineConfig, case_id: str) -> dict:
    return read_json(config.stage_dir("preprocess") / case_id / "status.json", "run the preprocess command first")


def usable(config: PipelineConfig, ids: list[str]) -> list[str]:
    return [i for i in ids if not case_status(config, i)["failed"]]


# ----------------------------------------------------------------------------- register


def _register_one(case_dir: Path, out: Path, config: PipelineConfig) -> float:
    set_threads(config.threads)
    files = case_files(case_dir)
    result = register_case(read_volume(require(files["sa_ed"])), read_volume(require(files["la_ed"])),
                           config.roi, config.registration)
    result.save(out)
    return result.final_mi


def run_register(config: PipelineConfig) -> int:
    root = Path(config.paths.data_root)
    stage = config.stage_dir("register")
    echo_config(config, stage)
    ids = usable(config, discover_cases(root))
    if not ids:
        return EXIT_ALL_FAILED
    parallel_map(_register_one, [(root / i, stage / i / "transform.json", config) for i in ids], config.workers)
    return EXIT_OK


def case_transform(config: PipelineConfig, case_id: str):
    if config.transforms == "phantom":
        return load_transform(require(case_files(Path(config.paths.data_root) / case_id)["transform"]))
    return load_transform(require(config.stage_dir("register") / case_id / "transform.json",
                                  "run the register command first"))


# ----------------------------------------------------------------------------- train


def run_train(config: PipelineConfig, resume=None, stop_after=None) -> int:
    set_threads(config.threads)
    stage = config.stage_dir("train")
    echo_config(config, stage)
    train_ids, _ = split_cases(config, discover_cases(config.paths.data_root))
    ids = usable(config, train_ids)
    if not ids:
        return EXIT_ALL_FAILED
    items = []
    pre = config.stage_dir("preprocess")
    for case_id in ids:
        items += training_cases(read_case_views(pre / case_id), case_transform(config, case_id), config.phases)
    state = None
    if resume is not None:
        state, saved = load_checkpoint(resume)
        if saved != config.train:
            log.warning("resuming with a training config that differs from the checkpoint's")
    result = train(
        items, config.train, config.augmentation if config.augment else None, config.network,
        out_dir=stage, resume=state, stop_after=stop_after,
        on_epoch=lambda e, loss: log.info("epoch %d loss %.6f", e, loss),
    )
    save_checkpoint(result.state, config.train, stage / "final.npz", config.network)
    write_json(stage / "history.json", {"cases": [it.case_id for it in items],
                                        "history": [repr(h) for h in result.history]})
    return EXIT_OK


# ----------------------------------------------------------------------------- predict


def _predict_one(case_id: str, checkpoint: Path, config: PipelineConfig) -> None:
    set_threads(config.threads)
    net = load_network(checkpoint)
    views = read_case_views(config.stage_dir("preprocess") / case_id)
    transform = case_transform(config, case_id)
    out = config.stage_dir("predict") / case_id
    for phase in config.phases:
        pred = predict_case(net, views, transform, phase, config.postprocess)
        for view in VIEWS:
            write_volume(getattr(pred, view), out / f"{view}_{phase}.nii.gz")
            write_volume(getattr(pred, f"{view}_raw"), out / f"{view}_{phase}_std.nii.gz")


def run_predict(config: PipelineConfig, checkpoint=None) -> int:
    checkpoint = require(Path(checkpoint or config.stage_dir("train") / "final.npz"), "run the train command first")
    echo_config(config, config.stage_dir("predict"))
    _, test_ids = split_cases(config, discover_cases(config.paths.data_root))
    ids = usable(config, test_ids)
    if not ids:
        return EXIT_ALL_FAILED
    parallel_map(_predict_one, [(i, checkpoint, config) for i in ids], config.workers)
    return EXIT_OK


# ----------------------------------------------------------------------------- evaluate


def _evaluate_one(case_id: str, config: PipelineConfig) -> list:
    status = case_status(config, case_id)
    rows = []
    files = case_files(Path(config.paths.data_root) / case_id)
    pred_dir = config.stage_dir("predict") / case_id
    for phase in config.phases:
        row_id = f"{case_id}_{phase}"
        if status["failed"]:
            rows.append(case_metrics(row_id, None, None, None, None, failed=True, reason=status["reason"]))
            continue
        truth = {v: read_mask(require(files[f"{v}_{phase}_gt"], "evaluation needs ground-truth masks")) for v in VIEWS}
        pred = {v: read_mask(require(pred_dir / f"{v}_{phase}.nii.gz", "run the predict command first")) for v in VIEWS}
        rows.append(case_metrics(row_id, pred["sa"], truth["sa"], pred["la"], truth["la"]))
    return rows


def run_evaluate(config: PipelineConfig) -> int:
    stage = config.stage_dir("evaluate")
    echo_config(config, stage)
    _, test_ids = split_cases(config, discover_cases(config.paths.data_root))
    rows = [r for batch in parallel_map(_evaluate_one, [(i, config) for i in test_ids], config.workers) for r in batch]
    report = MetricsReport(rows)
    report.write(stage)
    summary = report.summary()
    for key in ("testing", "testing_no_failures"):
        log.info("%s: %s", key, MetricsReport.format_aggregate(summary[key]))
    return EXIT_ALL_FAILED if all(r.failed for r in rows) else EXIT_OK


# ----------------------------------------------------------------------------- report


def _overlay(ax, image: np.ndarray, truth: np.ndarray, pred: np.ndarray, title: str) -> None:
    ax.imshow(image.T, cmap="gray", origin="lower")
    for labels, colour in ((truth, "lime"), (pred, "red")):
        if labels.any() and not labels.all():
            ax.contour(labels.T.astype(float), levels=[0.5], colors=colour, linewidths=1.0, origin="lower")
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()


def run_report(config: PipelineConfig) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stage = config.stage_dir("report")
    echo_config(config, stage)
    require(config.stage_dir("evaluate") / "metrics.csv", "run the evaluate command first")
    report = MetricsReport.read(config.stage_dir("evaluate"))
    entries = []
    for row in report.cases:
        if row.failed:
            entries.append({"case": row.case_id, "failed": True, "reason": row.reason})
            continue
        case_id, phase = row.case_id.rsplit("_", 1)
        files = case_files(Path(config.paths.data_root) / case_id)
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        for ax, view in zip(axes, VIEWS):
            image = read_volume(require(files[f"{view}_{phase}"])).voxels
            truth = read_mask(require(files[f"{view}_{phase}_gt"])).labels
            pred = read_mask(require(config.stage_dir("predict") / case_id / f"{view}_{phase}.nii.gz")).labels
            k = int(np.argmax(truth.sum(axis=(0, 1))))  # slice with the most ground truth
            dice = getattr(row, f"{view}_dice")
            _overlay(ax, image[:, :, k], truth[:, :, k], pred[:, :, k], f"{view.upper()} slice {k}  Dice {dice:.3f}")
        fig.suptitle(f"{row.case_id}  (green: truth, red: prediction)", fontsize=10)
        path = stage / f"{row.case_id}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        entries.append({"case": row.case_id, "failed": False, "image": path.name})
    summary = report.summary()
    write_json(stage / "index.json", {
        "cases": entries,
        "testing": MetricsReport.format_aggregate(summary["testing"]),
        "testing_no_failures": MetricsReport.format_aggregate(summary["testing_no_failures"]),
    })
    return EXIT_OK


def run_pipeline(command: str, config: PipelineConfig, **options) -> int:
    """Run one stage; returns the process exit status."""
    runners = {
        "phantom": run_phantom, "preprocess": run_preprocess, "register": run_register, "train": run_train,
        "predict": run_predict, "evaluate": run_evaluate, "report": run_report,
    }
    if command not in runners:
        raise ValueError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    return runners[command](config, **options)
