"""Modality-independent neighbourhood descriptor (reference forward).

For each voxel and each neighbourhood offset r, the channel value is
exp(-D_r / V) where D_r is the mean squared difference between the local
patch and the patch at p + r, and V is the mean of D over the six unit
offsets, floored to avoid division by zero on flat regions. Channels are
then divided by their per-voxel maximum, so the best-matching offset is
exactly 1. Patch sums and shifts clamp at the volume edge.

Uniform intensity offsets cancel inside the patch differences, which is
what makes the descriptor robust to the intensity drift typical of
repeated cone-beam acquisitions. This module is the plain numpy
reference; the differentiable twin used inside the losses is built from
autodiff ops and is tested against this one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume

SIX_NEIGHBOURHOOD = (
    (1, 0, 0), (-1, 0, 0),
    (0, 1, 0), (0, -1, 0),
    (0, 0, 1), (0, 0, -1),
)

# variance floor: 1e-6 * dynamic_range^2, with an absolute guard for
# perfectly flat volumes where the dynamic range itself is zero
VARIANCE_FLOOR_SCALE = 1e-6
VARIANCE_FLOOR_ABS = 1e-30


@dataclass(frozen=True)
class MindDescriptor:
    dims: tuple
    channels: np.ndarray  # (K, nx, ny, nz), values in (0, 1]
    neighborhood: tuple


def shift_clamped(arr: np.ndarray, offset) -> np.ndarray:
    """out[p] = arr[clip(p + offset)] with per-axis edge clamping."""
    out = arr
    for ax, delta in enumerate(offset):
        if delta == 0:
            continue
        n = out.shape[ax]
        d = min(abs(delta), n - 1)
        v = np.moveaxis(out, ax, -1)
        res = np.empty_like(v)
        if delta > 0:
            res[..., : n - d] = v[..., d:]
            res[..., n - d:] = v[..., n - 1:n]
        else:
            res[..., d:] = v[..., : n - d]
            res[..., :d] = v[..., 0:1]
        out = np.moveaxis(res, -1, ax)
    return np.ascontiguousarray(out)


def box_mean(arr: np.ndarray, radius: int) -> np.ndarray:
    """Edge-clamped box mean over the (2*radius+1)^3 neighbourhood."""
    acc = np.zeros(arr.shape, dtype=np.float64)
    offsets = range(-radius, radius + 1)
    for dx in offsets:
        for dy in offsets:
            for dz in offsets:
                acc += shift_clamped(arr, (dx, dy, dz))
    return acc / (2 * radius + 1) ** 3


def patch_distances(vox: np.ndarray, patch_radius: int, offsets) -> np.ndarray:
    """D_r = box mean of (I - I shifted by r)^2 for each offset, float64."""
    out = np.empty((len(offsets), *vox.shape), dtype=np.float64)
    v = vox.astype(np.float32, copy=False)
    for i, off in enumerate(offsets):
        diff = v - shift_clamped(v, off)
        out[i] = box_mean(diff * diff, patch_radius)
    return out


def mind(vol: Volume, patch_radius: int = 1, neighborhood=SIX_NEIGHBOURHOOD) -> MindDescriptor:
    if patch_radius < 1:
        raise ValueError(f"patch_radius must be >= 1, got {patch_radius}")
    if not neighborhood:
        raise ValueError("neighborhood must be non-empty")
    for off in neighborhood:
        if any(abs(o) >= d for o, d in zip(off, vol.dims)):
            raise ValueError(f"offset {off} exceeds volume dims {vol.dims}")

    d_chan = patch_distances(vol.voxels, patch_radius, tuple(neighborhood))
    if tuple(neighborhood) == SIX_NEIGHBOURHOOD:
        d_unit = d_chan
    else:
        d_unit = patch_distances(vol.voxels, patch_radius, SIX_NEIGHBOURHOOD)
    variance = d_unit.mean(axis=0)

    dyn = float(vol.voxels.max() - vol.voxels.min())
    floor = max(VARIANCE_FLOOR_SCALE * dyn * dyn, VARIANCE_FLOOR_ABS)
    v_eff = np.maximum(variance, floor)

    channels = np.exp(-d_chan / v_eff)
    channels /= channels.max(axis=0)
    return MindDescriptor(
        dims=vol.dims,
        channels=channels.astype(np.float32),
        neighborhood=tuple(neighborhood),
    )
