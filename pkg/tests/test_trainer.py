"""Trainer: crop sampling, plateau scheduling, the optimization loop, checkpoints."""

import json

import numpy as np
import pytest
import torch
from scipy import stats

from pointrender.errors import ConfigError, NumericError
from pointrender.evaluator import render_view
from pointrender.losses import LossWeights
from pointrender.renderer.net import ArchConfig, build_renderer
from pointrender.texture import init_texture
from pointrender.trainer import (TrainConfig, load_checkpoint,
                                 plateau_scheduler, sample_batch, train)
from pointrender.types import SplitSpec
from pointrender import trainer as trainer_mod
from oracles import make_toy_scene as toy_scene

MINI_ARCH = ArchConfig(buffer_channels=8, num_scales=2, widths=(8, 12),
                       body_blocks=1)


def _toy_config(**over):
    base = dict(lr_texture=5e-2, lr_renderer=1e-3, batch_size=2, crop=16,
                max_epochs=2, seed=7, arch=MINI_ARCH, texture_channels=8,
                loss=LossWeights(lambda_huber=1e3, lambda_vgg=0.0,
                                 lambda_fft=1.0),
                deterministic=True)
    base.update(over)
    return TrainConfig(**base)


# ---------------------------------------------------------------- TrainConfig

def test_config_validation():
    with pytest.raises(ConfigError):
        _toy_config(lr_texture=0.0)
    with pytest.raises(ConfigError):
        _toy_config(plateau_factor=1.0)
    with pytest.raises(ConfigError):
        _toy_config(batch_size=0)
    with pytest.raises(ConfigError):
        _toy_config(max_steps=0)
    with pytest.raises(ConfigError):
        _toy_config(grad_clip=0.0)
    with pytest.raises(ConfigError):
        _toy_config(texture_channels=4)  # renderer expects 8


def test_config_yaml_round_trip():
    config = _toy_config(max_steps=77)
    restored = TrainConfig.from_yaml(config.to_yaml())
    assert restored == config
    unclipped = _toy_config(grad_clip=None, freeze_env=True)
    assert TrainConfig.from_yaml(unclipped.to_yaml()) == unclipped


def test_config_yaml_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_yaml("lr_texture: 0.1\nmomentum: 0.9\n")


# --------------------------------------------------------------- sample_batch

def test_sample_batch_full_frame_origin_is_zero():
    scene = toy_scene(hw=16)
    batch = sample_batch(scene, _toy_config(crop=16), np.random.default_rng(0))
    assert all(s.origin == (0, 0) and not s.padded for s in batch)
    assert all(s.image.shape == (16, 16, 3) for s in batch)


def test_sample_batch_deterministic_given_seed():
    scene = toy_scene()
    config = _toy_config(batch_size=6)
    a = sample_batch(scene, config, np.random.default_rng(11))
    b = sample_batch(scene, config, np.random.default_rng(11))
    assert [s.image_id for s in a] == [s.image_id for s in b]
    assert [s.origin for s in a] == [s.origin for s in b]
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.image, sb.image)


def test_sample_batch_crop_adjusts_camera():
    scene = toy_scene(hw=24)
    batch = sample_batch(scene, _toy_config(crop=10, batch_size=16),
                         np.random.default_rng(5))
    for s in batch:
        full = scene.image(s.image_id)
        assert s.camera.cx == full.camera.cx - s.origin[0]
        assert s.camera.cy == full.camera.cy - s.origin[1]
        assert (s.camera.width, s.camera.height) == (10, 10)
        np.testing.assert_array_equal(
            s.image, full.image[s.origin[1]:s.origin[1] + 10,
                                s.origin[0]:s.origin[0] + 10])


def test_sample_batch_pads_small_images():
    scene = toy_scene(hw=12)
    batch = sample_batch(scene, _toy_config(crop=20, batch_size=4),
                         np.random.default_rng(2))
    for s in batch:
        assert s.padded and s.image.shape == (20, 20, 3)
        full = scene.image(s.image_id).image
        np.testing.assert_array_equal(s.image[:12, :12], full)
        # reflect: row 12 mirrors row 10 (row 11 is the edge)
        np.testing.assert_array_equal(s.image[12, :12], full[10])


def test_sample_batch_origin_distribution_uniform():
    scene = toy_scene(n_views=1, hw=20)
    config = _toy_config(crop=8, batch_size=8)
    rng = np.random.default_rng(99)
    counts = np.zeros((13, 13), dtype=np.int64)
    for _ in range(1250):
        for s in sample_batch(scene, config, rng):
            counts[s.origin[1], s.origin[0]] += 1
    result = stats.chisquare(counts.ravel())
    assert result.pvalue > 0.01, f"origin distribution non-uniform, p={result.pvalue:.4f}"


def test_sample_batch_empty_split_rejected():
    scene = toy_scene()
    scene.split = SplitSpec(train_ids=(),
                            test_ids=tuple(im.id for im in scene.images))
    with pytest.raises(ConfigError, match="train split"):
        sample_batch(scene, _toy_config(), np.random.default_rng(0))


# ---------------------------------------------------------- plateau_scheduler

def test_plateau_unchanged_while_improving():
    history = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    assert plateau_scheduler(history, 0.1) == 0.1


def test_plateau_halves_after_five_flat_epochs():
    history = [1.0, 1.05, 1.0, 1.1, 1.0, 1.2]
    assert plateau_scheduler(history, 0.1) == pytest.approx(0.05)


def test_plateau_four_flat_epochs_not_enough():
    history = [1.0, 1.05, 1.0, 1.1, 0.95]
    assert plateau_scheduler(history, 0.1) == 0.1
    # an early improvement inside the window also resets the count
    history = [1.0, 1.05, 0.9, 1.1, 1.0, 1.0, 1.0]
    assert plateau_scheduler(history, 0.1) == 0.1


def test_plateau_short_history_unchanged():
    assert plateau_scheduler([], 0.1) == 0.1
    assert plateau_scheduler([2.0, 2.0, 2.0, 2.0, 2.0], 0.1) == 0.1


def test_plateau_custom_patience():
    assert plateau_scheduler([1.0, 1.0, 1.0], 0.2, patience=2) == pytest.approx(0.1)
    assert plateau_scheduler([1.0, 0.5, 1.0], 0.2, patience=2) == 0.2


# ----------------------------------------------------------------- train loop

def test_train_runs_and_logs(tmp_path):
    scene = toy_scene()
    config = _toy_config(max_epochs=2)
    texture, renderer, log = train(scene, config, out_dir=tmp_path)
    assert len(log.entries) == 2
    for entry in log.entries:
        assert np.isfinite(entry["loss"])
        assert set(entry["breakdown"]) == {"huber", "vgg", "fft"}
        assert entry["breakdown"]["vgg"] == 0.0  # disabled term logged as zero
        assert entry["lr_texture"] == config.lr_texture
    assert (tmp_path / "texture" / "features.npy").exists()
    assert (tmp_path / "renderer" / "model.npz").exists()
    assert (tmp_path / "optimizer" / "texture.pt").exists()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 0


def test_train_deterministic_repeat():
    scene = toy_scene()
    config = _toy_config(max_epochs=2)
    _, _, log_a = train(scene, config)
    _, _, log_b = train(scene, config)
    a, b = log_a.epoch_losses, log_b.epoch_losses
    assert len(a) == len(b)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


def test_train_loss_decreases():
    scene = toy_scene(n_views=8, hw=24)
    config = _toy_config(max_epochs=6)
    _, _, log = train(scene, config)
    assert log.epoch_losses[-1] < log.epoch_losses[0]


def test_train_max_steps_caps_run():
    scene = toy_scene()
    config = _toy_config(max_epochs=10, max_steps=3)
    _, _, log = train(scene, config)
    assert log.entries[-1]["steps"] == 3
    assert len(log.entries) == 1


def test_untouched_rows_keep_initial_values():
    # one point far behind every camera can never rasterize
    scene = toy_scene(extra_points=[[0.0, 0.0, -50.0]])
    invisible = len(scene.cloud) - 1
    texture, _, _ = train(scene, _toy_config(max_epochs=2))
    row = texture.features.detach()[invisible]
    assert torch.equal(row, torch.zeros_like(row))
    # visible content did train
    assert texture.features.detach().abs().sum() > 0


def test_checkpoint_round_trip_render_is_bit_identical(tmp_path):
    scene = toy_scene()
    config = _toy_config(max_epochs=1)
    texture, renderer, _ = train(scene, config, out_dir=tmp_path)
    view = scene.test_images[0] if scene.test_images else scene.train_images[0]
    before = render_view(scene.cloud, texture, renderer, view)
    cloud2, texture2, renderer2, config2 = load_checkpoint(tmp_path)
    after = render_view(cloud2, texture2, renderer2, view)
    np.testing.assert_array_equal(before, after)
    assert config2 == config


def test_non_finite_loss_aborts_with_advice(tmp_path, monkeypatch):
    scene = toy_scene()

    def bad_loss(pred, target, weights, delta):
        return torch.tensor(float("nan"), requires_grad=True), {}

    monkeypatch.setattr(trainer_mod, "total_loss", bad_loss)
    with pytest.raises(NumericError, match="checkpoint retained"):
        train(scene, _toy_config(max_epochs=1), out_dir=tmp_path)


def test_train_rejects_channel_mismatch():
    with pytest.raises(ConfigError, match="channels"):
        _toy_config(texture_channels=12)


def test_grad_clip_handles_float32_norm_overflow():
    # squares of a 1e25-scale gradient overflow float32; the clip must rescale
    # to max_norm instead of zeroing everything via a 1/inf factor
    texture = init_texture(4, 8)
    renderer = build_renderer(MINI_ARCH, seed=0)
    idx = torch.tensor([[0, 2]])
    vals = torch.full((2, 8), 1e25)
    with torch.sparse.check_sparse_tensor_invariants():
        texture.table.grad = torch.sparse_coo_tensor(idx, vals,
                                                     texture.table.shape)
    for p in renderer.parameters():
        p.grad = torch.full_like(p, 1e25)
    trainer_mod._clip_gradients(texture, renderer, max_norm=100.0)
    g = texture.table.grad.coalesce()
    assert torch.isfinite(g.values()).all()
    assert abs(float(g.values().double().norm()) - 100.0) < 1e-3
    total = float(torch.sqrt(sum(
        p.grad.double().pow(2).sum() for p in renderer.parameters())))
    assert abs(total - 100.0) < 1e-3


def test_grad_clip_leaves_small_gradients_unchanged():
    texture = init_texture(4, 8)
    renderer = build_renderer(MINI_ARCH, seed=0)
    idx = torch.tensor([[1]])
    vals = torch.full((1, 8), 0.25)
    with torch.sparse.check_sparse_tensor_invariants():
        texture.table.grad = torch.sparse_coo_tensor(idx, vals,
                                                     texture.table.shape)
    originals = []
    for p in renderer.parameters():
        p.grad = torch.rand_like(p) * 1e-3
        originals.append(p.grad.clone())
    trainer_mod._clip_gradients(texture, renderer, max_norm=100.0)
    assert torch.equal(texture.table.grad.coalesce().values(), vals)
    for p, orig in zip(renderer.parameters(), originals):
        assert torch.equal(p.grad, orig)


def test_freeze_env_pins_env_row_at_zero():
    scene = toy_scene()
    texture, _, _ = train(scene, _toy_config(max_epochs=2, freeze_env=True))
    env = texture.table.detach()[-1]
    assert torch.equal(env, torch.zeros_like(env))
    # without the flag the environment feature trains away from zero
    texture2, _, _ = train(scene, _toy_config(max_epochs=2))
    assert texture2.table.detach()[-1].abs().sum() > 0
