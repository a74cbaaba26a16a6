"""Batch-of-one Adam training with a step-decayed learning rate and exact resume."""
from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .augmentation import AugmentationPolicy, augment_case
from .errors import ConfigError, DivergenceError, MissingArtifactError
from .gst import GstLayer, build_context
from .losses import LossWeights, total_loss
from .network import NetworkConfig, TemperaNet, init_weights
from .roi import PreprocessedCase
from .volume import AffineTransform

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tempera-checkpoint/1"
_EPOCH_1980 = (1980, 1, 1, 0, 0, 0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr0: float = Field(5e-4, gt=0)
    decay: float = Field(0.9, gt=0, le=1)
    decay_every: int = Field(30, ge=1)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    epochs: int = Field(300, ge=1)
    batch: Literal[1] = 1
    seed: int = 0
    checkpoint_every: int = Field(10, ge=1)
    clip_grad_norm: float | None = Field(None, gt=0)
    loss: LossWeights = LossWeights()


def lr_at(epoch: int, config: TrainConfig | None = None) -> float:
    """lr0 * decay ** (epoch // decay_every), evaluated in decimal so the table values come out exact."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    c = config or TrainConfig()
    k = epoch // c.decay_every
    return float(Decimal(repr(c.lr0)) * Decimal(repr(c.decay)) ** k)


@dataclass
class TrainState:
    net: TemperaNet
    m: dict
    v: dict
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    best: float = float("inf")

    @classmethod
    def fresh(cls, net: TemperaNet, seed: int) -> "TrainState":
        zeros = {n: torch.zeros_like(p) for n, p in net.named_parameters()}
        return cls(net, zeros, {n: z.clone() for n, z in zeros.items()},
                   rng_state=np.random.default_rng(seed).bit_generator.state)


def adam_step(state: TrainState, grads: dict, lr: float, config: TrainConfig) -> TrainState:
    """Bias-corrected Adam on every named parameter. Non-finite gradients abort before any update."""
    params = dict(state.net.named_parameters())
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in layer {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.epsilon))
            if not torch.isfinite(p).all():
                raise DivergenceError(f"layer {name} became non-finite after the update")
    return state


@dataclass(frozen=True, eq=False)
class TrainingCase:
    case_id: str
    case: PreprocessedCase
    transform: AffineTransform

    def context(self, sa_warp=None, la_warp=None):
        return build_context(self.transform, self.case.sa.geometry, self.case.la.geometry, sa_warp, la_warp)


def _tensor(arr, dtype):
    return torch.from_numpy(np.array(arr, dtype=np.float64)).to(dtype)


def case_loss(net: TemperaNet, item: TrainingCase, weights: LossWeights, policy: AugmentationPolicy | None = None,
              draw_seed: int = 0) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    if policy is None:
        case, ctx = item.case, item.context()
    else:
        aug = augment_case(item.case, policy, draw_seed)
        case, ctx = aug.case, item.context(aug.sa_warp, aug.la_warp)
    out = net(_tensor(case.sa.voxels, dtype), _tensor(case.la.voxels, dtype), GstLayer(ctx))
    return total_loss(out.sa_probability, _tensor(case.sa_mask.labels, dtype),
                      out.la_probability, _tensor(case.la_mask.labels, dtype), weights)


@dataclass
class TrainResult:
    state: TrainState
    history: list
    checkpoints: list


def _gradients(net: TemperaNet, clip: float | None) -> dict:
    if clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), clip)
    return {n: p.grad for n, p in net.named_parameters() if p.grad is not None}


def train(dataset: Sequence[TrainingCase], config: TrainConfig | None = None,
          policy: AugmentationPolicy | None = None, net_config: NetworkConfig | None = None,
          out_dir=None, resume: TrainState | None = None, validation: Sequence[TrainingCase] = (),
          stop_after: int | None = None, on_epoch: Callable[[int, float], None] | None = None,
          dtype=torch.float32) -> TrainResult:
    """Run epochs ``state.epoch .. config.epochs - 1``.

    ``policy=None`` trains on the un-augmented cases. ``stop_after`` ends the
    run early after that many epochs (used to simulate interruption).
    """
    config = config or TrainConfig()
    if not dataset:
        raise ConfigError("training dataset is empty")
    for item in dataset:
        if item.case.sa_mask is None or item.case.la_mask is None:
            raise ConfigError(f"case {item.case_id} has no training masks")
    state = resume or TrainState.fresh(init_weights(net_config, config.seed, dtype), config.seed)
    net = state.net
    out_dir = None if out_dir is None else Path(out_dir)
    saved = []
    done = 0
    while state.epoch < config.epochs:
        epoch = state.epoch
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        order = rng.permutation(len(dataset))
        draws = rng.integers(0, 2**63 - 1, size=len(dataset))
        lr = lr_at(epoch, config)
        losses = []
        for i, seed in zip(order, draws):
            item = dataset[int(i)]
            net.zero_grad(set_to_none=True)
            loss = case_loss(net, item, config.loss, policy, int(seed))
            if not torch.isfinite(loss):
                raise DivergenceError(f"epoch {epoch}, case {item.case_id}: loss is {loss.item()}")
            loss.backward()
            try:
                adam_step(state, _gradients(net, config.clip_grad_norm), lr, config)
            except DivergenceError as err:
                raise DivergenceError(f"epoch {epoch}, case {item.case_id}: {err}") from err
            losses.append(loss.item())
        state.rng_state = rng.bit_generator.state
        state.history.append(float(np.mean(losses)))
        state.epoch += 1
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, state.history[-1])
        if on_epoch is not None:
            on_epoch(epoch, state.history[-1])
        if out_dir is not None:
            if validation:
                val = validation_loss(net, validation, config.loss)
                if val < state.best:
                    state.best = val
                    save_checkpoint(state, config, out_dir / "best.npz", net_config)
            if state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs:
                saved.append(save_checkpoint(state, config, out_dir / f"epoch_{state.epoch:04d}.npz", net_config))
        done += 1
        if stop_after is not None and done >= stop_after:
            break
    return TrainResult(state, list(state.history), saved)


@torch.no_grad()
def validation_loss(net: TemperaNet, cases: Sequence[TrainingCase], weights: LossWeights) -> float:
    return float(np.mean([case_loss(net, c, weights).item() for c in cases]))


def save_checkpoint(state: TrainState, config: TrainConfig, path, net_config: NetworkConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, p in state.net.named_parameters():
        arrays[f"w/{name}"] = p.detach().cpu().numpy()
        arrays[f"m/{name}"] = state.m[name].cpu().numpy()
        arrays[f"v/{name}"] = state.v[name].cpu().numpy()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "train_config": config.model_dump(mode="json"),
        "network_config": (net_config or state.net.config).model_dump(mode="json"),
        "epoch": state.epoch,
        "step": state.step,
        "rng_state": state.rng_state,
        # repr keeps every float bit-exact through JSON
        "history": [repr(h) for h in state.history],
        "best": repr(state.best),
        "dtype": str(next(state.net.parameters()).dtype).removeprefix("torch."),
    }
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for key, arr in arrays.items():
            # fixed timestamps so identical state gives identical bytes
            with zf.open(zipfile.ZipInfo(key + ".npy", date_time=_EPOCH_1980), "w") as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        dtype = getattr(torch, meta["dtype"])
        net = TemperaNet(NetworkConfig.model_validate(meta["network_config"])).to(dtype)
        m, v = {}, {}
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(torch.from_numpy(z[f"w/{name}"]))
                m[name] = torch.from_numpy(np.array(z[f"m/{name}"]))
                v[name] = torch.from_numpy(np.array(z[f"v/{name}"]))
    state = TrainState(net, m, v, meta["epoch"], meta["step"], meta["rng_state"],
                       [float(h) for h in meta["history"]], float(meta["best"]))
    return state, TrainConfig.model_validate(meta["train_config"])


def load_network(path) -> TemperaNet:
    return load_checkpoint(path)[0].net
