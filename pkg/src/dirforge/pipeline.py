"""Two-stage training and inference orchestration.

Training runs the coarse stage on whole (mean-pooled) volumes, warps the
moving images by the learned coarse field, then trains the fine stage on
randomly sampled patch pairs of the coarsely aligned and target images.
Each optimisation step alternates one discriminator update with one
generator update. Inference predicts the coarse field, warps, predicts a
field per patch, fuses the patches, and composes coarse and fine fields
into the final transform.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses, model, nn
from .losses import LossWeights
from .transform import (DVF, build_patch_grid, compose, extract_patch,
                        fuse_patches, upsample_dvf, warp)
from .volume import DataError, Volume, _atomic_write_text

HU_SCALE = 1.0 / 1000.0  # network input conditioning


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 2e-4
    adam_betas: tuple = (0.5, 0.999)
    epochs_global: int = 20
    epochs_local: int = 20
    steps_per_epoch: int = 2
    patch_size: tuple = (64, 64, 64)
    overlap: tuple = (32, 32, 48)
    global_downsample_target: int = 64
    max_disp: float = 10.0
    mind_radius: int = 1
    seed: int = 0
    worker_count: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if any(o >= p for p, o in zip(self.patch_size, self.overlap)):
            raise ValueError(f"overlap {self.overlap} must be below patch size {self.patch_size}")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    def to_json(self) -> str:
        obj = {
            "weights": self.weights.to_dict(),
            "learning_rate": self.learning_rate,
            "adam_betas": list(self.adam_betas),
            "epochs_global": self.epochs_global,
            "epochs_local": self.epochs_local,
            "steps_per_epoch": self.steps_per_epoch,
            "patch_size": list(self.patch_size),
            "overlap": list(self.overlap),
            "global_downsample_target": self.global_downsample_target,
            "max_disp": self.max_disp,
            "mind_radius": self.mind_radius,
            "seed": self.seed,
            "worker_count": self.worker_count,
        }
        return json.dumps(obj, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed config JSON: {e}") from e
        kwargs = dict(obj)
        if "weights" in kwargs:
            kwargs["weights"] = LossWeights.from_dict(kwargs["weights"])
        for key in ("adam_betas", "patch_size", "overlap"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            return TrainConfig(**kwargs)
        except TypeError as e:
            raise DataError(f"invalid config: {e}") from e


@dataclass
class RegistrationResult:
    final_dvf: DVF
    deformed: Volume
    global_dvf: DVF
    local_dvf: DVF
    timing: dict
    patch_count: int


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moments, kept in float64."""

    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params: dict, state: AdamState, lr: float, betas=(0.5, 0.999),
              eps: float = 1e-8) -> AdamState:
    """Standard bias-corrected Adam update, applied in place to the
    float32 parameters; moments accumulate in float64."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} ({name})")
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.data.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.data.shape, dtype=np.float64)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g64
        v = b2 * v + (1.0 - b2) * (g64 * g64)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = (p.data.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
    return state


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def to_net(voxels: np.ndarray) -> np.ndarray:
    """HU -> network input scale."""
    return (voxels * np.float32(HU_SCALE)).astype(np.float32)


def mean_pool_volume(vol: Volume, target_max: int) -> Volume:
    """Block-mean a volume until every axis is <= target_max voxels."""
    factors = tuple(max(1, -(-d // target_max)) for d in vol.dims)
    for d, f in zip(vol.dims, factors):
        if d % f:
            raise ValueError(f"dim {d} not divisible by pooling factor {f}")
    if factors == (1, 1, 1):
        return vol
    fx, fy, fz = factors
    nx, ny, nz = (d // f for d, f in zip(vol.dims, factors))
    pooled = (
        vol.voxels.reshape(nx, fx, ny, fy, nz, fz)
        .mean(axis=(1, 3, 5), dtype=np.float64)
        .astype(np.float32)
    )
    spacing = tuple(s * f for s, f in zip(vol.spacing, factors))
    return Volume(dims=(nx, ny, nz), spacing=spacing, voxels=pooled)


class _NoGrad:
    """Temporarily clear requires_grad on a parameter set."""

    def __init__(self, *param_sets):
        self.tensors = [t for ps in param_sets for t in ps.trainable()]

    def __enter__(self):
        self.saved = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, s in zip(self.tensors, self.saved):
            t.requires_grad = s
        return False


def predict_dvf(moving_net: np.ndarray, target_net: np.ndarray,
                gen: model.GeneratorParams, max_disp: float) -> DVF:
    """Tape-free generator forward returning a plain displacement field."""
    with _NoGrad(gen):
        out = model.generator_forward(
            nn.Tensor(moving_net[None]), nn.Tensor(target_net[None]), gen, max_disp
        )
    return DVF(dims=tuple(moving_net.shape), displacement=out.data)


# --------------------------------------------------------------------------
# GAN step
# --------------------------------------------------------------------------

def _gan_step(moving_net: np.ndarray, target_net: np.ndarray,
              gen: model.GeneratorParams, disc: model.DiscriminatorParams,
              gen_state: AdamState, disc_state: AdamState,
              cfg: TrainConfig, target_descriptor) -> dict:
    """One discriminator update followed by one generator update."""
    gen_params = gen.tensors
    disc_params = disc.tensors
    mov_t = nn.Tensor(moving_net[None])
    tgt_t = nn.Tensor(target_net[None])

    dvf_t = model.generator_forward(mov_t, tgt_t, gen, cfg.max_disp)
    deformed_t = nn.warp_image(moving_net, dvf_t)

    # discriminator sees the deformed image as a constant
    nn.zero_grad(disc_params.values())
    d_fake = model.discriminator_forward(nn.Tensor(deformed_t.data.copy()), disc)
    d_real = model.discriminator_forward(tgt_t, disc)
    d_loss = losses.adv_discriminator_loss(d_fake, d_real)
    nn.backward(d_loss)
    adam_step(disc_params, disc_state, cfg.learning_rate, cfg.adam_betas)

    # generator update against the refreshed discriminator
    nn.zero_grad(gen_params.values())
    nn.zero_grad(disc_params.values())
    d_on_deformed = model.discriminator_forward(deformed_t, disc)
    total, parts = losses.total_generator_loss(
        deformed_t, tgt_t, dvf_t, d_on_deformed, cfg.weights,
        patch_radius=cfg.mind_radius, target_descriptor=target_descriptor,
        return_parts=True,
    )
    nn.backward(total)
    adam_step(gen_params, gen_state, cfg.learning_rate, cfg.adam_betas)
    parts["adv_d"] = d_loss.item()
    return parts


def _mean_history_row(epoch: int, stage: str, rows) -> dict:
    return {
        "epoch": epoch,
        "stage": stage,
        "sim": float(np.mean([r["sim"] for r in rows])),
        "adv_g": float(np.mean([r["adv_g"] for r in rows])),
        "adv_d": float(np.mean([r["adv_d"] for r in rows])),
        "reg": float(np.mean([r["reg"] for r in rows])),
        "total": float(np.mean([r["total"] for r in rows])),
    }


HISTORY_CSV_HEADER = "epoch,stage,sim,adv_g,adv_d,reg,total"


def history_csv(history) -> str:
    lines = [HISTORY_CSV_HEADER]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['stage']},{row['sim']:.6f},{row['adv_g']:.6f},"
            f"{row['adv_d']:.6f},{row['reg']:.6f},{row['total']:.6f}"
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# training stages
# --------------------------------------------------------------------------

def _check_pairs(pairs):
    if not pairs:
        raise ValueError("training requires at least one (moving, target) pair")
    dims = pairs[0][0].dims
    for mov, tgt in pairs:
        if mov.dims != dims or tgt.dims != dims:
            raise ValueError("all training volumes must share dims")


def train_global(pairs, cfg: TrainConfig, arch: model.ArchSpec = model.ArchSpec()):
    """Train the whole-volume stage; volumes are mean-pooled to the
    configured size first. Returns (gen, disc, history)."""
    _check_pairs(pairs)
    pooled = [
        (mean_pool_volume(m, cfg.global_downsample_target),
         mean_pool_volume(t, cfg.global_downsample_target))
        for m, t in pairs
    ]
    for m, _ in pooled:
        if any(d % 8 for d in m.dims):
            raise ValueError(f"dims {m.dims} not divisible by 8 after downsampling")
    arrays = [(to_net(m.voxels), to_net(t.voxels)) for m, t in pooled]
    gen = model.init_generator_params("global", cfg.seed, arch)
    disc = model.init_discriminator_params("global", cfg.seed + 1, arch)
    history = _train_loop(arrays, gen, disc, cfg, cfg.epochs_global, "global")
    return gen, disc, history


def train_local(pairs, cfg: TrainConfig, arch: model.ArchSpec = model.ArchSpec()):
    """Train the patch stage on (coarsely aligned, target) pairs; one
    uniformly sampled grid patch per step."""
    _check_pairs(pairs)
    dims = pairs[0][0].dims
    grid = build_patch_grid(dims, cfg.patch_size, cfg.overlap)
    rng = np.random.default_rng(cfg.seed + 17)
    arrays = [(to_net(m.voxels), to_net(t.voxels)) for m, t in pairs]
    gen = model.init_generator_params("local", cfg.seed + 2, arch)
    disc = model.init_discriminator_params("local", cfg.seed + 3, arch)

    def sampler(pair_idx, descriptor_cache):
        start = grid.starts[int(rng.integers(len(grid.starts)))]
        mov, tgt = arrays[pair_idx]
        key = (pair_idx, start)
        mov_p = np.ascontiguousarray(extract_patch(mov, start, grid.patch_size))
        tgt_p = np.ascontiguousarray(extract_patch(tgt, start, grid.patch_size))
        if key not in descriptor_cache:
            descriptor_cache[key] = losses.mind_graph(
                nn.Tensor(tgt_p[None]), cfg.mind_radius
            )
        return mov_p, tgt_p, descriptor_cache[key]

    history = _train_loop(arrays, gen, disc, cfg, cfg.epochs_local, "local", sampler)
    return gen, disc, history


def _train_loop(arrays, gen, disc, cfg, epochs, stage, sampler=None):
    gen_state, disc_state = AdamState(), AdamState()
    target_descriptors = {}
    cache = {}
    history = []
    for epoch in range(1, epochs + 1):
        rows = []
        for _ in range(cfg.steps_per_epoch):
            for pair_idx in range(len(arrays)):
                if sampler is None:
                    mov, tgt = arrays[pair_idx]
                    if pair_idx not in target_descriptors:
                        target_descriptors[pair_idx] = losses.mind_graph(
                            nn.Tensor(tgt[None]), cfg.mind_radius
                        )
                    desc = target_descriptors[pair_idx]
                else:
                    mov, tgt, desc = sampler(pair_idx, cache)
                rows.append(_gan_step(mov, tgt, gen, disc, gen_state, disc_state, cfg, desc))
        history.append(_mean_history_row(epoch, stage, rows))
    return history


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def register(moving: Volume, target: Volume,
             global_params: model.GeneratorParams,
             local_params: model.GeneratorParams,
             cfg: TrainConfig) -> RegistrationResult:
    """Coarse field, coarse warp, per-patch fine fields, fusion, and
    composition into the final transform."""
    if moving.dims != target.dims:
        raise ValueError(f"moving {moving.dims} and target {target.dims} differ")
    if global_params.stage != "global" or local_params.stage != "local":
        raise ValueError("register needs a global and a local generator, in that order")
    dims = moving.dims

    t0 = time.perf_counter()
    mov_low = mean_pool_volume(moving, cfg.global_downsample_target)
    tgt_low = mean_pool_volume(target, cfg.global_downsample_target)
    if any(d % 8 for d in mov_low.dims):
        raise ValueError(f"dims {mov_low.dims} not divisible by 8 after downsampling")
    g_low = predict_dvf(to_net(mov_low.voxels), to_net(tgt_low.voxels),
                        global_params, cfg.max_disp)
    global_dvf = upsample_dvf(g_low, dims) if g_low.dims != dims else g_low
    globally_deformed = warp(moving, global_dvf)
    t_global = time.perf_counter() - t0

    t1 = time.perf_counter()
    patch_size = cfg.patch_size
    grid = build_patch_grid(dims, patch_size, cfg.overlap)
    gd_net = to_net(globally_deformed.voxels)
    tgt_net = to_net(target.voxels)

    def one_patch(start):
        mov_p = np.ascontiguousarray(extract_patch(gd_net, start, patch_size))
        tgt_p = np.ascontiguousarray(extract_patch(tgt_net, start, patch_size))
        return predict_dvf(mov_p, tgt_p, local_params, cfg.max_disp)

    if cfg.worker_count > 1:
        with ThreadPoolExecutor(max_workers=cfg.worker_count) as pool:
            patch_dvfs = list(pool.map(one_patch, grid.starts))
    else:
        patch_dvfs = [one_patch(s) for s in grid.starts]
    local_dvf = fuse_patches(patch_dvfs, grid)
    t_local = time.perf_counter() - t1

    t2 = time.perf_counter()
    final_dvf = compose(global_dvf, local_dvf)
    deformed = warp(moving, final_dvf)
    t_compose = time.perf_counter() - t2

    return RegistrationResult(
        final_dvf=final_dvf,
        deformed=deformed,
        global_dvf=global_dvf,
        local_dvf=local_dvf,
        timing={
            "global_s": t_global,
            "local_s": t_local,
            "compose_s": t_compose,
            "total_s": t_global + t_local + t_compose,
        },
        patch_count=len(grid.starts),
    )


# --------------------------------------------------------------------------
# checkpoint directory layout
# --------------------------------------------------------------------------

CKPT_NAMES = ("global_gen", "global_disc", "local_gen", "local_disc")


def save_checkpoints(out_dir, global_gen, global_disc, local_gen, local_disc,
                     cfg: TrainConfig, history) -> None:
    os.makedirs(out_dir, exist_ok=True)
    arch = global_gen.arch
    nn.save_params(global_gen.tensors, os.path.join(out_dir, "global_gen"))
    nn.save_params(global_disc.tensors, os.path.join(out_dir, "global_disc"))
    nn.save_params(local_gen.tensors, os.path.join(out_dir, "local_gen"))
    nn.save_params(local_disc.tensors, os.path.join(out_dir, "local_disc"))
    _atomic_write_text(os.path.join(out_dir, "arch.json"), arch.to_json() + "\n")
    _atomic_write_text(os.path.join(out_dir, "config.json"), cfg.to_json() + "\n")
    _atomic_write_text(os.path.join(out_dir, "loss_history.csv"), history_csv(history))


def load_generators(ckpt_dir):
    """Load the two generators plus the frozen config from a checkpoint
    directory (discriminators are training-only)."""
    arch_path = os.path.join(ckpt_dir, "arch.json")
    cfg_path = os.path.join(ckpt_dir, "config.json")
    if not os.path.exists(arch_path) or not os.path.exists(cfg_path):
        raise DataError(f"checkpoint dir {ckpt_dir} is missing arch.json/config.json")
    with open(arch_path) as f:
        arch = model.ArchSpec.from_json(f.read())
    with open(cfg_path) as f:
        cfg = TrainConfig.from_json(f.read())
    gg = model.generator_from_arrays(
        "global", nn.load_params(os.path.join(ckpt_dir, "global_gen")), arch)
    lg = model.generator_from_arrays(
        "local", nn.load_params(os.path.join(ckpt_dir, "local_gen")), arch)
    return gg, lg, cfg
