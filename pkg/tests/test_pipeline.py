import numpy as np
import pytest

from dirforge import nn
from dirforge.losses import LossWeights
from dirforge.model import init_generator_params
from dirforge.phantom import PhantomSpec, RigidShift, make_phantom
from dirforge.pipeline import (AdamState, TrainConfig, adam_step,
                               load_generators, mean_pool_volume, register,
                               save_checkpoints, train_global, train_local,
                               history_csv)
from dirforge.volume import Volume

SMALL = dict(dims=(16, 16, 16), spacing=(0.9, 0.9, 2.0))


def small_phantom(shift=(0.9, 0.0, 0.0), seed=0):
    spec = PhantomSpec(dims=SMALL["dims"], spacing=SMALL["spacing"], seed=seed,
                       deformation=(RigidShift(shift),), landmark_count=4)
    return make_phantom(spec)


def small_cfg(**kw):
    base = dict(epochs_global=2, epochs_local=2, steps_per_epoch=1,
                patch_size=(16, 16, 16), overlap=(8, 8, 8),
                global_downsample_target=16)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config

def test_config_defaults_round_trip():
    cfg = TrainConfig()
    assert cfg.weights == LossWeights()
    assert cfg.learning_rate == 2e-4
    assert cfg.adam_betas == (0.5, 0.999)
    assert (cfg.epochs_global, cfg.epochs_local) == (20, 20)
    assert cfg.patch_size == (64, 64, 64)
    assert cfg.overlap == (32, 32, 48)
    assert cfg.global_downsample_target == 64
    back = TrainConfig.from_json(cfg.to_json())
    assert back == cfg


def test_config_validation():
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="overlap"):
        TrainConfig(patch_size=(16, 16, 16), overlap=(16, 8, 8))


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_fixed_point():
    p = nn.parameter(np.array([1.0, -2.0], np.float32))
    p.grad = np.zeros(2, np.float32)
    state = AdamState()
    adam_step({"p": p}, state, lr=0.1)
    assert np.array_equal(p.data, np.array([1.0, -2.0], np.float32))
    assert np.all(state.m["p"] == 0.0) and np.all(state.v["p"] == 0.0)


def test_adam_first_step_size():
    p = nn.parameter(np.array([0.0], np.float32))
    p.grad = np.array([3.7], np.float32)
    adam_step({"p": p}, AdamState(), lr=0.01)
    # bias-corrected ratio is ~1 on the first step
    assert p.data[0] == pytest.approx(-0.01, rel=1e-5)


def test_adam_quadratic_bowl_matches_scalar_oracle():
    lr, betas, eps = 0.05, (0.5, 0.999), 1e-8
    p = nn.parameter(np.array([2.0], np.float32))
    state = AdamState()
    # independent scalar re-implementation
    x = 2.0
    m = v = 0.0
    losses_engine = []
    losses_oracle = []
    for t in range(1, 11):
        p.grad = np.array([2.0 * p.data[0]], np.float32)  # d/dx of x^2
        adam_step({"p": p}, state, lr=lr, betas=betas, eps=eps)
        g = 2.0 * x
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        x = x - lr * (m / (1 - betas[0] ** t)) / (np.sqrt(v / (1 - betas[1] ** t)) + eps)
        losses_engine.append(float(p.data[0]) ** 2)
        losses_oracle.append(x * x)
        assert p.data[0] == pytest.approx(x, abs=1e-6)
    assert all(b < a for a, b in zip(losses_engine, losses_engine[1:]))
    np.testing.assert_allclose(losses_engine, losses_oracle, atol=1e-6)


def test_adam_shape_mismatch():
    p = nn.parameter(np.zeros(3, np.float32))
    p.grad = np.zeros(2, np.float32)
    with pytest.raises(ValueError, match="shape"):
        adam_step({"p": p}, AdamState(), lr=0.1)


# ---------------------------------------------------------------- pooling

def test_mean_pool_volume():
    vox = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    v = Volume(dims=(4, 4, 4), spacing=(1.0, 1.0, 2.0), voxels=vox)
    pooled = mean_pool_volume(v, 2)
    assert pooled.dims == (2, 2, 2)
    assert pooled.spacing == (2.0, 2.0, 4.0)
    assert pooled.voxels[0, 0, 0] == pytest.approx(vox[:2, :2, :2].mean())
    assert mean_pool_volume(v, 4) is v  # no pooling needed


def test_mean_pool_divisibility_error():
    v = Volume(dims=(10, 4, 4), spacing=(1, 1, 1), voxels=np.zeros((10, 4, 4), np.float32))
    with pytest.raises(ValueError, match="divisible"):
        mean_pool_volume(v, 4)  # needs factor 3, which does not divide 10


# ---------------------------------------------------------------- training

def test_identity_pair_starts_at_zero_similarity():
    _, target, _, _, _ = small_phantom()
    cfg = small_cfg(epochs_global=1)
    _, _, history = train_global([(target, target)], cfg)
    assert history[0]["sim"] == pytest.approx(0.0, abs=1e-6)


def test_training_is_deterministic():
    moving, target, _, _, _ = small_phantom()
    cfg = small_cfg()
    g1, d1, h1 = train_global([(moving, target)], cfg)
    g2, d2, h2 = train_global([(moving, target)], cfg)
    for name in g1.tensors:
        assert np.array_equal(g1.tensors[name].data, g2.tensors[name].data)
    for name in d1.tensors:
        assert np.array_equal(d1.tensors[name].data, d2.tensors[name].data)
    assert h1 == h2


def test_training_progress_on_rigid_phantom():
    moving, target, _, _, _ = small_phantom()
    cfg = small_cfg(epochs_global=8, steps_per_epoch=2)
    _, _, history = train_global([(moving, target)], cfg)
    sims = [row["sim"] for row in history]
    assert np.median(sims[-3:]) < np.median(sims[:3])


def test_train_local_single_patch_grid_and_identity_start():
    _, target, _, _, _ = small_phantom()
    cfg = small_cfg(epochs_local=1)
    _, _, history = train_local([(target, target)], cfg)
    assert history[0]["stage"] == "local"
    assert history[0]["sim"] == pytest.approx(0.0, abs=1e-6)


def test_train_rejects_empty_or_mismatched_pairs():
    moving, target, _, _, _ = small_phantom()
    with pytest.raises(ValueError, match="at least one"):
        train_global([], small_cfg())
    other = Volume(dims=(8, 8, 8), spacing=(1, 1, 1),
                   voxels=np.zeros((8, 8, 8), np.float32))
    with pytest.raises(ValueError, match="share dims"):
        train_global([(moving, target), (other, other)], small_cfg())


def test_history_csv_format():
    rows = [{"epoch": 1, "stage": "global", "sim": 0.5, "adv_g": 0.7,
             "adv_d": 0.69, "reg": 0.0, "total": 100.7}]
    text = history_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,stage,sim,adv_g,adv_d,reg,total"
    assert lines[1].startswith("1,global,0.5")


# ---------------------------------------------------------------- inference

def test_register_identity_chain_bit_exact():
    for shift in [(0.0, 0.0, 0.0), (0.9, 0.0, 0.0), (0.0, 0.9, 2.0)]:
        moving, target, _, _, _ = small_phantom(shift=shift)
        cfg = small_cfg()
        gg = init_generator_params("global", 0)
        lg = init_generator_params("local", 2)
        result = register(moving, target, gg, lg, cfg)
        assert np.all(result.final_dvf.displacement == 0.0)
        assert np.all(result.global_dvf.displacement == 0.0)
        assert np.all(result.local_dvf.displacement == 0.0)
        assert np.array_equal(result.deformed.voxels, moving.voxels)


def test_register_patch_count_matches_grid():
    moving, target, _, _, _ = small_phantom()
    cfg = small_cfg(patch_size=(8, 8, 8), overlap=(4, 4, 4))
    gg = init_generator_params("global", 0)
    lg = init_generator_params("local", 2)
    result = register(moving, target, gg, lg, cfg)
    assert result.patch_count == 27  # 3 starts per axis: 16 = 8 + 2*4
    assert result.timing["total_s"] > 0.0


def test_register_worker_fanout_matches_serial():
    moving, target, _, _, _ = small_phantom()
    cfg = small_cfg(patch_size=(8, 8, 8), overlap=(4, 4, 4))
    gg = init_generator_params("global", 0)
    lg = init_generator_params("local", 2)
    lg.tensors["head_w"].data = np.random.default_rng(3).normal(
        0, 0.01, lg.tensors["head_w"].data.shape).astype(np.float32)
    serial = register(moving, target, gg, lg, cfg)
    import dataclasses
    parallel = register(moving, target, gg, lg, dataclasses.replace(cfg, worker_count=3))
    assert np.array_equal(serial.final_dvf.displacement, parallel.final_dvf.displacement)


def test_register_stage_validation():
    moving, target, _, _, _ = small_phantom()
    gg = init_generator_params("global", 0)
    with pytest.raises(ValueError, match="global and a local"):
        register(moving, target, gg, gg, small_cfg())


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    moving, target, _, _, _ = small_phantom()
    cfg = small_cfg(epochs_global=1, epochs_local=1)
    gg, gd, hist_g = train_global([(moving, target)], cfg)
    lg, ld, hist_l = train_local([(moving, target)], cfg)
    save_checkpoints(str(tmp_path), gg, gd, lg, ld, cfg, hist_g + hist_l)
    gg2, lg2, cfg2 = load_generators(str(tmp_path))
    assert cfg2 == cfg
    for name in gg.tensors:
        assert np.array_equal(gg2.tensors[name].data, gg.tensors[name].data)
        assert np.array_equal(lg2.tensors[name].data, lg.tensors[name].data)
    assert (tmp_path / "loss_history.csv").exists()
    assert (tmp_path / "arch.json").exists()
