"""``tempera`` command line.

Exit codes: 0 success, 1 invalid configuration or usage, 2 missing artifact, 3 every case failed.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import yaml

from . import stages
from .config import load_config
from .errors import ConfigError, DetectionError, MissingArtifactError, VolumeIOError
from .pipeline import register_case
from .postprocess import postprocess_mask
from .roi import CropRecord, preprocess_view
from .volume import Geometry, read_mask, read_volume, write_volume

log = logging.getLogger("tempera")


def _parse_set(values) -> dict:
    out = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise click.UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def common(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(path_type=Path), help="YAML run configuration."),
        click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override any config field, e.g. train.epochs=5."),
        click.option("--data-root", type=click.Path(path_type=Path), help="Dataset directory (overrides $TEMPERA_DATA_ROOT)."),
        click.option("--out-root", type=click.Path(path_type=Path), help="Root for per-stage output directories."),
        click.option("--seed", type=int, help="Global seed."),
        click.option("--workers", type=int, help="Parallel case workers."),
        click.option("-v", "--verbose", count=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config(config_path, sets, data_root=None, out_root=None, seed=None, workers=None, verbose=0, **extra):
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for key, value in (("paths.data_root", data_root), ("paths.output_root", out_root), ("seed", seed),
                       ("workers", workers), *extra.items()):
        if value is not None:
            overrides[key] = str(value) if isinstance(value, Path) else value
    overrides.update(_parse_set(sets))
    return load_config(config_path, overrides)


@click.group()
def cli():
    """Multi-view right-ventricle segmentation pipeline."""


@cli.command()
@common
@click.option("--n", type=int, help="Number of cases.")
@click.option("--out", type=click.Path(path_type=Path), help="Destination (defaults to the data root).")
def phantom(n, out, **kw):
    """Write a synthetic SA/LA dataset with ground truth and exact transforms."""
    config = _config(**kw, **{"phantom.n": n})
    return stages.run_phantom(config, out=out)


@cli.command()
@common
@click.option("--ed", type=click.Path(path_type=Path), help="Single-volume mode: ED image.")
@click.option("--es", type=click.Path(path_type=Path), help="Single-volume mode: ES image.")
@click.option("--view", type=click.Choice(["sa", "la"]))
@click.option("--out", type=click.Path(path_type=Path), help="Single-volume mode: output directory.")
def preprocess(ed, es, view, out, **kw):
    """Resample, detect the heart, crop and normalise."""
    config = _config(**kw)
    single = (ed, es, view, out)
    if not any(single):
        return stages.run_preprocess(config)
    if not all(single):
        raise click.UsageError("single-volume mode needs --ed, --es, --view and --out together")
    try:
        pv = preprocess_view(read_volume(ed), read_volume(es), view, config.roi)
    except DetectionError as exc:
        click.echo(f"heart detection failed: {exc}", err=True)
        return stages.EXIT_ALL_FAILED
    stages.write_view(pv, out)
    return stages.EXIT_OK


@cli.command()
@common
@click.option("--sa", type=click.Path(path_type=Path), help="Single-pair mode: SA image.")
@click.option("--la", type=click.Path(path_type=Path), help="Single-pair mode: LA image.")
@click.option("--out", type=click.Path(path_type=Path), help="Single-pair mode: transform.json to write.")
def register(sa, la, out, **kw):
    """Estimate the SA->LA affine by mutual information."""
    config = _config(**kw)
    single = (sa, la, out)
    if not any(single):
        return stages.run_register(config)
    if not all(single):
        raise click.UsageError("single-pair mode needs --sa, --la and --out together")
    register_case(read_volume(sa), read_volume(la), config.roi, config.registration).save(out)
    return stages.EXIT_OK


@cli.command()
@common
@click.option("--epochs", type=int, help="Shorthand for --set train.epochs=N.")
@click.option("--resume", type=click.Path(path_type=Path), help="Checkpoint to continue from.")
@click.option("--stop-after", type=int, help="Stop after this many epochs in this invocation.")
def train(epochs, resume, stop_after, **kw):
    """Train on the non-held-out cases."""
    config = _config(**kw, **{"train.epochs": epochs})
    return stages.run_train(config, resume=resume, stop_after=stop_after)


@cli.command()
@common
@click.option("--checkpoint", type=click.Path(path_type=Path), help="Defaults to train/final.npz.")
def predict(checkpoint, **kw):
    """Segment the held-out cases and project masks back to the acquisition grids."""
    return stages.run_predict(_config(**kw), checkpoint=checkpoint)


@cli.command()
@common
def evaluate(**kw):
    """Dice and Hausdorff per case plus aggregate tables."""
    return stages.run_evaluate(_config(**kw))


@cli.command()
@common
def report(**kw):
    """Render prediction/truth contour overlays as PNG files."""
    return stages.run_report(_config(**kw))


@cli.command()
@common
@click.option("--in", "in_path", type=click.Path(path_type=Path), required=True, help="Standardized-grid mask.")
@click.option("--meta", type=click.Path(path_type=Path), required=True, help="View sidecar written by preprocess.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def postprocess(in_path, meta, out, **kw):
    """Clean one mask and map it back to its acquisition grid."""
    config = _config(**kw)
    sidecar = stages.read_json(meta)
    mask = postprocess_mask(read_mask(stages.require(in_path)), CropRecord.from_dict(sidecar["crop"]),
                            Geometry.from_dict(sidecar["resampled_geometry"]),
                            Geometry.from_dict(sidecar["original_geometry"]), config.postprocess)
    write_volume(mask, out)
    return stages.EXIT_OK


@cli.command("run")
@common
@click.option("--with-phantom", is_flag=True, help="Generate the phantom dataset first.")
def run_all(with_phantom, **kw):
    """preprocess -> register -> train -> predict -> evaluate -> report."""
    config = _config(**kw)
    commands = stages.COMMANDS if with_phantom else stages.COMMANDS[1:]
    for command in commands:
        log.info("stage %s", command)
        status = stages.run_pipeline(command, config)
        if status != stages.EXIT_OK:
            return status
    return stages.EXIT_OK


def main(argv=None) -> int:
    try:
        status = cli.main(args=argv, prog_name="tempera", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return stages.EXIT_INVALID
    except click.ClickException as exc:
        exc.show()
        return stages.EXIT_INVALID
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return stages.EXIT_INVALID
    except (MissingArtifactError, VolumeIOError) as exc:
        click.echo(f"error: {exc}", err=True)
        return stages.EXIT_MISSING
    # --help returns None
    return stages.EXIT_OK if status is None else int(status)


if __name__ == "__main__":
    sys.exit(main())
