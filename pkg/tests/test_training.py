import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from tempera.augmentation import AugmentationPolicy
from tempera.errors import ConfigError, DivergenceError, MissingArtifactError
from tempera.network import NetworkConfig, init_weights, weight_fingerprint
from tempera.training import (
    TrainConfig,
    TrainState,
    adam_step,
    lr_at,
    load_checkpoint,
    save_checkpoint,
    train,
)

MINI = NetworkConfig.miniature()


def test_schedule_table():
    assert lr_at(0) == 5e-4
    assert lr_at(29) == 5e-4
    assert lr_at(30) == 4.5e-4
    assert lr_at(90) == 3.645e-4


@given(st.integers(0, 2000), st.integers(0, 2000))
def test_schedule_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert lr_at(hi) <= lr_at(lo)


def test_schedule_rejects_negative():
    with pytest.raises(ValueError):
        lr_at(-1)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr0, c.decay, c.decay_every, c.beta1, c.beta2, c.epsilon, c.epochs, c.batch) == (
        5e-4, 0.9, 30, 0.9, 0.999, 1e-8, 300, 1)
    for bad in ({"batch": 2}, {"lr0": 0}, {"beta2": 1.0}, {"epochs": 0}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def fresh(seed=0):
    return TrainState.fresh(init_weights(MINI, seed, torch.float64), seed)


def test_moment_shapes_mirror_weights():
    s = fresh()
    for name, p in s.net.named_parameters():
        assert s.m[name].shape == p.shape and s.v[name].shape == p.shape


def test_zero_gradient_leaves_weights_and_decays_moments():
    s = fresh()
    cfg = TrainConfig()
    grads = {n: torch.ones_like(p) for n, p in s.net.named_parameters()}
    adam_step(s, grads, 1e-3, cfg)
    before = {n: p.detach().clone() for n, p in s.net.named_parameters()}
    m0 = {n: m.clone() for n, m in s.m.items()}
    v0 = {n: v.clone() for n, v in s.v.items()}
    zero = {n: torch.zeros_like(p) for n, p in s.net.named_parameters()}
    # with non-zero first moments the weights still move, so check from zero moments too
    s2 = fresh()
    w2 = {n: p.detach().clone() for n, p in s2.net.named_parameters()}
    adam_step(s2, zero, 1e-3, cfg)
    for n, p in s2.net.named_parameters():
        assert torch.equal(p, w2[n])
    adam_step(s, zero, 1e-3, cfg)
    for n in m0:
        assert torch.allclose(s.m[n], 0.9 * m0[n])
        assert torch.allclose(s.v[n], 0.999 * v0[n])
    assert any(not torch.equal(p, before[n]) for n, p in s.net.named_parameters())


def test_first_step_is_lr_sign():
    s = fresh()
    lr = 1e-3
    g = {n: torch.randn(p.shape, dtype=p.dtype, generator=torch.Generator().manual_seed(1)) for n, p in s.net.named_parameters()}
    before = {n: p.detach().clone() for n, p in s.net.named_parameters()}
    adam_step(s, g, lr, TrainConfig())
    for n, p in s.net.named_parameters():
        closed = -lr * g[n] / (g[n].abs() + 1e-8)
        assert (p - before[n] - closed).abs().max() < 1e-6


def test_constant_gradient_update_tends_to_lr():
    s = fresh()
    lr = 1e-3
    g = {n: torch.full_like(p, 0.37) for n, p in s.net.named_parameters()}
    for _ in range(99):
        adam_step(s, g, lr, TrainConfig())
    before = {n: p.detach().clone() for n, p in s.net.named_parameters()}
    adam_step(s, g, lr, TrainConfig())
    for n, p in s.net.named_parameters():
        step = (before[n] - p).abs()
        assert torch.all((step - lr).abs() <= 0.01 * lr)


def test_non_finite_gradient_names_layer_and_aborts():
    s = fresh()
    grads = {n: torch.zeros_like(p) for n, p in s.net.named_parameters()}
    grads["la_head.weight"][0] = float("nan")
    before = weight_fingerprint(s.net)
    with pytest.raises(DivergenceError, match="la_head.weight"):
        adam_step(s, grads, 1e-3, TrainConfig())
    assert weight_fingerprint(s.net) == before and s.step == 0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    s = fresh(3)
    g = {n: torch.randn(p.shape, dtype=p.dtype) for n, p in s.net.named_parameters()}
    adam_step(s, g, 1e-3, TrainConfig())
    s.history = [0.1 + 0.2, 1 / 3]
    path = save_checkpoint(s, TrainConfig(seed=3), tmp_path / "c.npz")
    back, cfg = load_checkpoint(path)
    assert cfg == TrainConfig(seed=3)
    assert weight_fingerprint(back.net) == weight_fingerprint(s.net)
    for n in s.m:
        assert torch.equal(back.m[n], s.m[n]) and torch.equal(back.v[n], s.v[n])
    assert back.history == s.history and back.step == s.step and back.rng_state == s.rng_state


def test_missing_and_foreign_checkpoint(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nope.npz")
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other"}'))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.npz")


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        train([], TrainConfig(epochs=1), net_config=MINI)


def test_resume_matches_uninterrupted(phantom_training_set, tmp_path):
    data = phantom_training_set[:3]
    cfg = TrainConfig(epochs=3, seed=5)
    policy = AugmentationPolicy()
    full = train(data, cfg, policy, MINI, dtype=torch.float64)
    part = train(data, cfg, policy, MINI, out_dir=tmp_path, stop_after=2, dtype=torch.float64)
    path = save_checkpoint(part.state, cfg, tmp_path / "mid.npz")
    state, cfg2 = load_checkpoint(path)
    resumed = train(data, cfg2, policy, MINI, resume=state)
    assert resumed.history == full.history
    assert weight_fingerprint(resumed.state.net) == weight_fingerprint(full.state.net)


def test_checkpoint_cadence(phantom_training_set, tmp_path):
    res = train(phantom_training_set[:1], TrainConfig(epochs=3, checkpoint_every=2), None, MINI, out_dir=tmp_path,
                validation=phantom_training_set[1:2])
    assert [p.name for p in res.checkpoints] == ["epoch_0002.npz", "epoch_0003.npz"]
    assert (tmp_path / "best.npz").exists()


def test_divergence_carries_context(phantom_training_set):
    item = phantom_training_set[0]
    bad = np.array(item.case.sa.voxels)
    bad[0, 0, 0] = np.nan
    broken = dataclasses.replace(item, case=dataclasses.replace(item.case, sa=item.case.sa.with_voxels(bad)))
    with pytest.raises(DivergenceError, match=f"epoch 0, case {item.case_id}"):
        train([broken], TrainConfig(epochs=1), None, MINI)


def test_smoke_training_loss_decreases_and_is_deterministic(phantom_training_set):
    cfg = TrainConfig(epochs=30, seed=1)
    a = train(phantom_training_set, cfg, AugmentationPolicy(), MINI, stop_after=5)
    h = a.history
    assert len(h) == 5
    assert sum(b >= x for x, b in zip(h, h[1:])) <= 1, h
    b = train(phantom_training_set, cfg, AugmentationPolicy(), MINI, stop_after=5)
    assert b.history == h
