"""Generator and discriminator assembly for the coarse (whole-volume) and
fine (patch) registration stages.

Both stages share one architecture: an 11-convolution encoder in four
blocks (channels 2-16-32-64-64) with max pooling after the first three
blocks, two additive attention gates bridging the second and third
pooling boundaries, and a 3-channel displacement head at 1/8 resolution
whose tanh output is bounded so the upsampled field never exceeds
``max_disp`` voxels. The head is zero-initialised, so an untrained
network predicts the identity transform. The discriminator is a small
fully convolutional stack with stride-2 convolutions and a sigmoid
realism map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 2
    block_channels: tuple = (16, 32, 64, 64)
    convs_per_block: tuple = (2, 3, 3, 3)
    kernel: int = 3
    gate_inter: tuple = (16, 32)
    head_kernel: int = 3
    disc_channels: tuple = (16, 32, 64)
    disc_kernel: int = 3

    def __post_init__(self):
        if sum(self.convs_per_block) != 11:
            raise ValueError(f"encoder must have 11 convolutions, got {sum(self.convs_per_block)}")
        if len(self.block_channels) != len(self.convs_per_block):
            raise ValueError("block_channels and convs_per_block must align")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ArchSpec":
        obj = json.loads(text)
        for key in ("block_channels", "convs_per_block", "gate_inter", "disc_channels"):
            obj[key] = tuple(obj[key])
        return ArchSpec(**obj)

    # ---- derived shape tables -------------------------------------------
    def encoder_layers(self):
        """(name, in_ch, out_ch) for the 11 encoder convolutions."""
        layers = []
        prev = self.in_channels
        idx = 1
        for block, (ch, n_convs) in enumerate(zip(self.block_channels, self.convs_per_block)):
            for _ in range(n_convs):
                layers.append((f"enc{idx:02d}", prev, ch))
                prev = ch
                idx += 1
        return layers

    def gate_layers(self):
        """Shapes for the two attention gates (skip, gating, inter)."""
        b = self.block_channels
        return [
            ("gate1", b[1], b[2], self.gate_inter[0]),
            ("gate2", b[2], b[3], self.gate_inter[1]),
        ]

    def head_in_channels(self) -> int:
        b = self.block_channels
        return b[1] + b[2] + b[3]

    def generator_shapes(self) -> dict:
        k = self.kernel
        shapes = {}
        for name, ci, co in self.encoder_layers():
            shapes[f"{name}_w"] = (co, ci, k, k, k)
            shapes[f"{name}_b"] = (co,)
        for name, x_ch, g_ch, inter in self.gate_layers():
            shapes[f"{name}_wx_w"] = (inter, x_ch, 1, 1, 1)
            shapes[f"{name}_wx_b"] = (inter,)
            shapes[f"{name}_wg_w"] = (inter, g_ch, 1, 1, 1)
            shapes[f"{name}_wg_b"] = (inter,)
            shapes[f"{name}_psi_w"] = (1, inter, 1, 1, 1)
            shapes[f"{name}_psi_b"] = (1,)
        hk = self.head_kernel
        shapes["head_w"] = (3, self.head_in_channels(), hk, hk, hk)
        shapes["head_b"] = (3,)
        return shapes

    def discriminator_shapes(self) -> dict:
        k = self.disc_kernel
        shapes = {}
        prev = 1
        for i, ch in enumerate((*self.disc_channels, 1), start=1):
            shapes[f"disc{i}_w"] = (ch, prev, k, k, k)
            shapes[f"disc{i}_b"] = (ch,)
            prev = ch
        return shapes


def _check_shapes(tensors: dict, expected: dict, what: str):
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ValueError(f"{what} parameter names mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        got = tuple(tensors[name].data.shape)
        if got != shape:
            raise ValueError(f"{what} parameter {name} has shape {got}, expected {shape}")


@dataclass
class GeneratorParams:
    stage: str
    arch: ArchSpec
    tensors: dict

    def __post_init__(self):
        _check_shapes(self.tensors, self.arch.generator_shapes(), f"{self.stage} generator")
        if self.tensors["head_w"].data.shape[0] != 3:
            raise ValueError("displacement head must output exactly 3 channels")

    def trainable(self):
        return list(self.tensors.values())


@dataclass
class DiscriminatorParams:
    stage: str
    arch: ArchSpec
    tensors: dict

    def __post_init__(self):
        _check_shapes(self.tensors, self.arch.discriminator_shapes(), f"{self.stage} discriminator")
        last = max(k for k in self.tensors if k.endswith("_w"))
        if self.tensors[last].data.shape[0] != 1:
            raise ValueError("discriminator must end in a single channel")

    def trainable(self):
        return list(self.tensors.values())


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_from_shapes(shapes: dict, rng, zero_names=()):
    tensors = {}
    for name, shape in shapes.items():
        if name in zero_names or name.endswith("_b"):
            tensors[name] = nn.parameter(np.zeros(shape, dtype=np.float32))
        else:
            tensors[name] = nn.parameter(_he_uniform(rng, shape))
    return tensors


def init_generator_params(stage: str, seed: int, arch: ArchSpec = ArchSpec()) -> GeneratorParams:
    """Fan-in scaled uniform weights, zero biases, zero displacement head
    (identity transform at the start of training). Deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = _init_from_shapes(arch.generator_shapes(), rng, zero_names=("head_w",))
    return GeneratorParams(stage=stage, arch=arch, tensors=tensors)


def init_discriminator_params(stage: str, seed: int, arch: ArchSpec = ArchSpec()) -> DiscriminatorParams:
    rng = np.random.default_rng(seed)
    tensors = _init_from_shapes(arch.discriminator_shapes(), rng)
    return DiscriminatorParams(stage=stage, arch=arch, tensors=tensors)


def generator_from_arrays(stage: str, arrays: dict, arch: ArchSpec = ArchSpec()) -> GeneratorParams:
    return GeneratorParams(stage=stage, arch=arch,
                           tensors={k: nn.parameter(v) for k, v in arrays.items()})


def discriminator_from_arrays(stage: str, arrays: dict, arch: ArchSpec = ArchSpec()) -> DiscriminatorParams:
    return DiscriminatorParams(stage=stage, arch=arch,
                               tensors={k: nn.parameter(v) for k, v in arrays.items()})


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def attention_gate(x: nn.Tensor, g: nn.Tensor, params: dict, prefix: str) -> nn.Tensor:
    """Additive attention: a = sigmoid(psi(relu(Wx x + Wg g))), out = x * a.

    ``g`` is the deeper, coarser gating map and is upsampled to x's grid;
    all projections are 1x1x1 convolutions.
    """
    wx_w = params[f"{prefix}_wx_w"]
    if x.data.shape[0] != wx_w.data.shape[1]:
        raise ValueError(
            f"gate {prefix}: skip map has {x.data.shape[0]} channels, "
            f"params expect {wx_w.data.shape[1]}"
        )
    wg_w = params[f"{prefix}_wg_w"]
    if g.data.shape[0] != wg_w.data.shape[1]:
        raise ValueError(
            f"gate {prefix}: gating map has {g.data.shape[0]} channels, "
            f"params expect {wg_w.data.shape[1]}"
        )
    if g.data.shape[1:] != x.data.shape[1:]:
        g = nn.upsample_trilinear(g, x.data.shape[1:])
    xs = nn.conv3d(x, wx_w, params[f"{prefix}_wx_b"])
    gs = nn.conv3d(g, wg_w, params[f"{prefix}_wg_b"])
    a = nn.sigmoid(nn.conv3d(nn.relu(xs + gs), params[f"{prefix}_psi_w"], params[f"{prefix}_psi_b"]))
    return x * a


def generator_forward(moving: nn.Tensor, target: nn.Tensor, params: GeneratorParams,
                      max_disp: float = 10.0) -> nn.Tensor:
    """Predict a (3, X, Y, Z) displacement field in voxel units.

    The bounded head lives at 1/8 resolution; trilinear upsampling with
    per-axis value rescaling returns it to the input grid, keeping every
    component within ``max_disp`` input voxels.
    """
    if moving.data.shape != target.data.shape:
        raise ValueError(f"moving {moving.data.shape} and target {target.data.shape} differ")
    if moving.data.shape[0] != 1:
        raise ValueError("generator inputs must be single-channel")
    dims = moving.data.shape[1:]
    if any(d % 8 for d in dims):
        raise ValueError(f"input dims {dims} must be divisible by 8")
    arch = params.arch
    p = params.tensors
    pad = arch.kernel // 2

    h = nn.concat_channels([moving, target])
    block_outputs = []
    idx = 1
    for block, n_convs in enumerate(arch.convs_per_block):
        for _ in range(n_convs):
            h = nn.leaky_relu(nn.conv3d(h, p[f"enc{idx:02d}_w"], p[f"enc{idx:02d}_b"], padding=pad))
            idx += 1
        block_outputs.append(h)
        if block < len(arch.convs_per_block) - 1:
            h = nn.maxpool3d(h)
    b1, b2, b3, b4 = block_outputs

    gated2 = attention_gate(b2, b3, p, "gate1")
    gated3 = attention_gate(b3, b4, p, "gate2")
    fused = nn.concat_channels([
        nn.meanpool3d(gated2, (4, 4, 4)),
        nn.meanpool3d(gated3, (2, 2, 2)),
        b4,
    ])
    head = nn.conv3d(fused, p["head_w"], p["head_b"], padding=arch.head_kernel // 2)
    ratios = tuple(dims[ax] / head.data.shape[1 + ax] for ax in range(3))
    bounded = nn.tanh(head) * float(max_disp / max(ratios))
    return nn.upsample_trilinear(bounded, dims, channel_scale=ratios)


def discriminator_forward(image: nn.Tensor, params: DiscriminatorParams) -> nn.Tensor:
    """Per-region realism probabilities: four stride-2 convolutions ending
    in a sigmoid, spatial extent reduced 16x."""
    if image.data.shape[0] != 1:
        raise ValueError("discriminator input must be single-channel")
    dims = image.data.shape[1:]
    if min(dims) < 16:
        raise ValueError(f"input dims {dims} too small for four stride-2 layers")
    arch = params.arch
    p = params.tensors
    pad = arch.disc_kernel // 2
    h = image
    n_layers = len(arch.disc_channels) + 1
    for i in range(1, n_layers + 1):
        h = nn.conv3d(h, p[f"disc{i}_w"], p[f"disc{i}_b"], stride=2, padding=pad)
        if i < n_layers:
            h = nn.leaky_relu(h)
    return nn.sigmoid(h)
