"""Training objectives: descriptor-space similarity (normalized cross
correlation plus a gradient-difference term), displacement-field
smoothness, adversarial binary cross entropy, and their weighted total.

The similarity loss first maps both images through a differentiable
neighbourhood descriptor (same definition as :mod:`dirforge.mind`, built
from autodiff ops) so that intensity drift between acquisitions does not
masquerade as misalignment.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .mind import SIX_NEIGHBOURHOOD, VARIANCE_FLOOR_ABS, VARIANCE_FLOOR_SCALE

NCC_EPS = 1e-8
BCE_CLAMP = 1e-7
NORM_EPS = 1e-20  # inside sqrt of the field norms; keeps the gradient
                  # finite at an exactly-zero field


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 200.0   # similarity
    beta: float = 1.0      # adversarial
    gamma: float = 10.0    # field regularisation
    delta: float = 5.0     # gradient-difference share inside similarity
    mu1: float = 1.0       # first-derivative weight
    mu2: float = 0.5       # second-derivative weight

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "LossWeights":
        return LossWeights(**obj)


# --------------------------------------------------------------------------
# differentiable descriptor
# --------------------------------------------------------------------------

def _box_mean_graph(t: nn.Tensor, radius: int) -> nn.Tensor:
    """Edge-clamped box mean, separable over the three spatial axes."""
    scale = 1.0 / (2 * radius + 1)
    for ax in (1, 2, 3):
        acc = t
        for d in range(1, radius + 1):
            acc = acc + nn.axis_shift(t, ax, d) + nn.axis_shift(t, ax, -d)
        t = acc * scale
    return t


def mind_graph(image: nn.Tensor, patch_radius: int = 1,
               neighborhood=SIX_NEIGHBOURHOOD) -> nn.Tensor:
    """Differentiable neighbourhood descriptor of a (1, X, Y, Z) tensor.

    Returns a (K, X, Y, Z) tensor in (0, 1] with per-voxel max exactly 1.
    """
    if image.data.shape[0] != 1:
        raise ValueError("descriptor input must be single-channel")
    if patch_radius < 1:
        raise ValueError(f"patch_radius must be >= 1, got {patch_radius}")
    if not neighborhood:
        raise ValueError("neighborhood must be non-empty")
    dims = image.data.shape[1:]
    for off in neighborhood:
        if any(abs(o) >= d for o, d in zip(off, dims)):
            raise ValueError(f"offset {off} exceeds dims {dims}")

    def distance(off):
        diff = image - nn.shift3d(image, off)
        return _box_mean_graph(diff * diff, patch_radius)

    d_unit = {off: distance(off) for off in SIX_NEIGHBOURHOOD}
    variance = d_unit[SIX_NEIGHBOURHOOD[0]]
    for off in SIX_NEIGHBOURHOOD[1:]:
        variance = variance + d_unit[off]
    variance = variance * (1.0 / len(SIX_NEIGHBOURHOOD))

    dyn = float(image.data.max() - image.data.min())
    floor = max(VARIANCE_FLOOR_SCALE * dyn * dyn, VARIANCE_FLOOR_ABS)
    v_eff = nn.clamp(variance, floor, np.inf)

    chans = []
    for off in neighborhood:
        d = d_unit.get(tuple(off))
        if d is None:
            d = distance(tuple(off))
        chans.append(nn.exp(-(d / v_eff)))
    stacked = nn.concat_channels(chans)
    return stacked / nn.max_channel(stacked)


# --------------------------------------------------------------------------
# similarity pieces
# --------------------------------------------------------------------------

def ncc(a: nn.Tensor, b: nn.Tensor) -> nn.Tensor:
    """Pearson correlation per channel, averaged; in [-1, 1]."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    spatial = tuple(range(1, a.data.ndim))
    mu_a = nn.mean_over(a, spatial, keepdims=True)
    mu_b = nn.mean_over(b, spatial, keepdims=True)
    ac = a - mu_a
    bc = b - mu_b
    va = nn.mean_over(ac * ac, spatial, keepdims=True)
    vb = nn.mean_over(bc * bc, spatial, keepdims=True)
    cov = nn.mean_over(ac * bc, spatial, keepdims=True)
    r = cov / nn.sqrt((va + NCC_EPS) * (vb + NCC_EPS))
    return nn.mean_all(r)


def gd(a: nn.Tensor, b: nn.Tensor) -> nn.Tensor:
    """Mean squared difference of spatial gradients (central differences,
    one-sided at the borders), over all axes and voxels."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    total = None
    for ax in (1, 2, 3):
        diff = nn.first_diff(a, ax) - nn.first_diff(b, ax)
        term = nn.mean_all(diff * diff)
        total = term if total is None else total + term
    return total * (1.0 / 3.0)


def sim_loss(deformed: nn.Tensor, target: nn.Tensor, delta: float = 5.0,
             patch_radius: int = 1, neighborhood=SIX_NEIGHBOURHOOD,
             target_descriptor: nn.Tensor = None) -> nn.Tensor:
    """[1 - NCC(descriptors)] + delta * GD(descriptors).

    ``target_descriptor`` may be passed to reuse a precomputed constant
    descriptor of the target (it carries no gradient anyway).
    """
    if deformed.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch: {deformed.data.shape} vs {target.data.shape}")
    md = mind_graph(deformed, patch_radius, neighborhood)
    mt = target_descriptor
    if mt is None:
        mt = mind_graph(target, patch_radius, neighborhood)
    return (1.0 - ncc(md, mt)) + float(delta) * gd(md, mt)


# --------------------------------------------------------------------------
# field regularisation
# --------------------------------------------------------------------------

def _rms_norm(sq_mean: nn.Tensor) -> nn.Tensor:
    # sqrt shifted by a tiny epsilon so a zero field has zero value and
    # finite gradient; the shift cancels exactly at zero
    return nn.sqrt(sq_mean + NORM_EPS) - float(np.sqrt(np.float64(NORM_EPS)))


def reg_loss(dvf: nn.Tensor, mu1: float = 1.0, mu2: float = 0.5) -> nn.Tensor:
    """Smoothness penalty: mu1 * ||J|| + mu2 * ||L||, where J collects the
    nine first-derivative maps and L the three per-component Laplacians,
    both as root-mean-square over voxels and maps."""
    if dvf.data.shape[0] != 3:
        raise ValueError(f"expected a 3-channel field, got {dvf.data.shape[0]} channels")
    jac = None
    for ax in (1, 2, 3):
        dd = nn.first_diff(dvf, ax)
        term = nn.mean_all(dd * dd)
        jac = term if jac is None else jac + term
    jac = jac * (1.0 / 3.0)

    lap = None
    for ax in (1, 2, 3):
        piece = nn.second_diff(dvf, ax)
        lap = piece if lap is None else lap + piece
    lap_sq = nn.mean_all(lap * lap)

    return float(mu1) * _rms_norm(jac) + float(mu2) * _rms_norm(lap_sq)


# --------------------------------------------------------------------------
# adversarial terms
# --------------------------------------------------------------------------

def _check_probability_map(t: nn.Tensor, name: str):
    if t.data.min() < 0.0 or t.data.max() > 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got range "
                         f"[{t.data.min():.4f}, {t.data.max():.4f}]")


def adv_generator_loss(disc_out_on_deformed: nn.Tensor) -> nn.Tensor:
    """Non-saturating generator objective: mean BCE against the real label."""
    _check_probability_map(disc_out_on_deformed, "discriminator output")
    p = nn.clamp(disc_out_on_deformed, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -nn.mean_all(nn.log(p))


def adv_discriminator_loss(disc_out_on_deformed: nn.Tensor,
                           disc_out_on_target: nn.Tensor) -> nn.Tensor:
    """Mean BCE of target-vs-real plus deformed-vs-fake, halved."""
    _check_probability_map(disc_out_on_deformed, "discriminator output (deformed)")
    _check_probability_map(disc_out_on_target, "discriminator output (target)")
    pd = nn.clamp(disc_out_on_deformed, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pt = nn.clamp(disc_out_on_target, BCE_CLAMP, 1.0 - BCE_CLAMP)
    real_term = -nn.mean_all(nn.log(pt))
    fake_term = -nn.mean_all(nn.log(1.0 - pd))
    return 0.5 * (real_term + fake_term)


# --------------------------------------------------------------------------
# total
# --------------------------------------------------------------------------

def total_generator_loss(deformed: nn.Tensor, target: nn.Tensor, dvf: nn.Tensor,
                         disc_out: nn.Tensor, weights: LossWeights,
                         patch_radius: int = 1,
                         target_descriptor: nn.Tensor = None,
                         return_parts: bool = False):
    sim = sim_loss(deformed, target, weights.delta, patch_radius,
                   target_descriptor=target_descriptor)
    adv = adv_generator_loss(disc_out)
    reg = reg_loss(dvf, weights.mu1, weights.mu2)
    total = weights.alpha * sim + weights.beta * adv + weights.gamma * reg
    if return_parts:
        return total, {"sim": sim.item(), "adv_g": adv.item(), "reg": reg.item(),
                       "total": total.item()}
    return total
