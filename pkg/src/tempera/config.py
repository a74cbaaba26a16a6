"""Run configuration: one validated document covering every stage."""
from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .augmentation import AugmentationPolicy
from .errors import ConfigError, MissingArtifactError
from .network import NetworkConfig
from .postprocess import PostprocessConfig
from .registration import RegistrationConfig
from .roi import RoiConfig
from .training import TrainConfig

DATA_ROOT_ENV = "TEMPERA_DATA_ROOT"
CONFIG_ECHO = "config.yaml"

# sub-configs that take the global seed unless they name their own
_SEEDED = ("train", "augmentation", "registration")


class PathsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    data_root: Path = Path("data")
    output_root: Path = Path("runs")


class PhantomRunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(25, ge=1)
    dilated_every: int = Field(10, ge=1)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 7
    paths: PathsConfig = PathsConfig()
    phantom: PhantomRunConfig = PhantomRunConfig()
    roi: RoiConfig = RoiConfig()
    registration: RegistrationConfig = RegistrationConfig()
    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    augmentation: AugmentationPolicy = AugmentationPolicy()
    postprocess: PostprocessConfig = PostprocessConfig()
    # the last ``test_cases`` cases (sorted by id) are held out; 0 means predict on everything
    test_cases: int = Field(5, ge=0)
    phases: tuple[Literal["ed", "es"], ...] = ("ed", "es")
    transforms: Literal["registered", "phantom"] = "registered"
    augment: bool = True
    workers: int = Field(1, ge=1)
    threads: int = Field(1, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _spread_seed(cls, data: Any):
        if not isinstance(data, dict) or "seed" not in data:
            return data
        data = dict(data)
        for key in _SEEDED:
            sub = data.get(key)
            if sub is None:
                data[key] = {"seed": data["seed"]}
            elif isinstance(sub, dict) and "seed" not in sub:
                data[key] = {**sub, "seed": data["seed"]}
        return data

    @model_validator(mode="after")
    def _check(self):
        if not self.phases:
            raise ValueError("phases must name at least one of ed, es")
        return self

    def stage_dir(self, stage: str) -> Path:
        return Path(self.paths.output_root) / stage

    def dump(self) -> dict:
        return self.model_dump(mode="json")


def set_dotted(doc: dict, dotted: str, value) -> dict:
    """``set_dotted(d, "train.epochs", 3)`` sets ``d["train"]["epochs"] = 3``."""
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        child = node.get(k)
        if not isinstance(child, dict):
            child = {}
            node[k] = child
        node = child
    node[keys[-1]] = value
    return doc


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def load_config(path=None, overrides: dict | None = None, env=None) -> PipelineConfig:
    """Defaults, then the file, then the data-root env var, then ``overrides`` (dotted keys)."""
    env = os.environ if env is None else env
    doc = copy.deepcopy(read_config_file(path)) if path is not None else {}
    if env.get(DATA_ROOT_ENV):
        set_dotted(doc, "paths.data_root", env[DATA_ROOT_ENV])
    for key, value in (overrides or {}).items():
        set_dotted(doc, key, value)
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def echo_config(config: PipelineConfig, directory) -> Path:
    """Write the effective config next to a stage's outputs; reloading it reproduces ``config``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_ECHO
    path.write_text(yaml.safe_dump(config.dump(), sort_keys=False))
    return path
