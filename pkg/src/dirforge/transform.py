"""Spatial transformation: trilinear warping, field resampling and
composition, and overlap-weighted patch fusion.

Displacement fields are stored in voxel units internally; millimetres
appear only in the on-disk container (converted with the volume spacing).
A warp samples the source at ``p + d(p)``; coordinates outside the grid
clamp to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import DataError, Volume, read_container, write_container


@dataclass(frozen=True)
class DVF:
    """Per-voxel displacement field, shape (3, nx, ny, nz), voxel units."""

    dims: tuple
    displacement: np.ndarray

    def __post_init__(self):
        if self.displacement.shape != (3, *self.dims):
            raise ValueError(
                f"displacement {self.displacement.shape} does not match dims {self.dims}"
            )
        if self.displacement.dtype != np.float32:
            raise ValueError("displacement must be float32")
        if not np.all(np.isfinite(self.displacement)):
            raise ValueError("displacement contains non-finite values")


def zero_dvf(dims) -> DVF:
    return DVF(dims=tuple(dims), displacement=np.zeros((3, *dims), dtype=np.float32))


@dataclass(frozen=True)
class PatchGrid:
    """Regular patch tiling that covers a volume completely."""

    patch_size: tuple
    stride: tuple
    starts: tuple  # of (x0, y0, z0)
    volume_dims: tuple


# --------------------------------------------------------------------------
# trilinear sampling core (shared by warp, upsampling and composition)
# --------------------------------------------------------------------------

def trilinear_parts(dims, coords):
    """Corner indices and weights for trilinear sampling with border clamp.

    coords: (3, N) float array of sample positions in voxel units.
    Returns (idx0, idx1, frac) where idx*, frac are (3, N).
    """
    nx, ny, nz = dims
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64).reshape(3, 1)
    c = np.clip(coords.astype(np.float64, copy=False), 0.0, hi)
    i0 = np.floor(c)
    # keep the upper corner in range; at the top border frac becomes 0
    i0 = np.minimum(i0, np.maximum(hi - 1.0, 0.0))
    frac = c - i0
    i1 = np.minimum(i0 + 1.0, hi)
    return i0.astype(np.intp), i1.astype(np.intp), frac.astype(np.float32)


def sample_trilinear(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample a (nx, ny, nz) grid at (3, N) voxel coordinates."""
    i0, i1, f = trilinear_parts(grid.shape, coords)
    x0, y0, z0 = i0
    x1, y1, z1 = i1
    fx, fy, fz = f
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c000 = grid[x0, y0, z0]
    c100 = grid[x1, y0, z0]
    c010 = grid[x0, y1, z0]
    c110 = grid[x1, y1, z0]
    c001 = grid[x0, y0, z1]
    c101 = grid[x1, y0, z1]
    c011 = grid[x0, y1, z1]
    c111 = grid[x1, y1, z1]
    return (
        c000 * (gx * gy * gz)
        + c100 * (fx * gy * gz)
        + c010 * (gx * fy * gz)
        + c110 * (fx * fy * gz)
        + c001 * (gx * gy * fz)
        + c101 * (fx * gy * fz)
        + c011 * (gx * fy * fz)
        + c111 * (fx * fy * fz)
    )


def identity_coords(dims) -> np.ndarray:
    """Voxel-centre coordinates of every grid point, shape (3, N)."""
    nx, ny, nz = dims
    gx, gy, gz = np.meshgrid(
        np.arange(nx, dtype=np.float32),
        np.arange(ny, dtype=np.float32),
        np.arange(nz, dtype=np.float32),
        indexing="ij",
    )
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()])


def warp(vol: Volume, dvf: DVF) -> Volume:
    """Resample ``vol`` at p + d(p). Borders clamp to the edge value."""
    if dvf.dims != vol.dims:
        raise ValueError(f"dvf dims {dvf.dims} do not match volume dims {vol.dims}")
    coords = identity_coords(vol.dims) + dvf.displacement.reshape(3, -1)
    out = sample_trilinear(vol.voxels, coords).reshape(vol.dims).astype(np.float32)
    return Volume(dims=vol.dims, spacing=vol.spacing, voxels=out)


def resample_channels(field: np.ndarray, target_dims) -> np.ndarray:
    """Trilinearly resample each channel of (C, *src) to (C, *target_dims).

    Endpoints align: target index i maps to source i*(src-1)/(tgt-1).
    """
    src_dims = field.shape[1:]
    coords = identity_coords(target_dims).astype(np.float64)
    for ax in range(3):
        t, s = target_dims[ax], src_dims[ax]
        scale = (s - 1) / (t - 1) if t > 1 else 0.0
        coords[ax] *= scale
    out = np.empty((field.shape[0], *target_dims), dtype=np.float32)
    for c in range(field.shape[0]):
        out[c] = sample_trilinear(field[c], coords).reshape(target_dims).astype(np.float32)
    return out


def upsample_dvf(dvf: DVF, target_dims) -> DVF:
    """Upsample a field and rescale displacements to target voxel units.

    Each component is multiplied by the per-axis dimension ratio so a
    displacement spanning a fixed physical distance stays correct.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(t < s for t, s in zip(target_dims, dvf.dims)):
        raise ValueError(f"cannot downsample dvf {dvf.dims} -> {target_dims}")
    up = resample_channels(dvf.displacement, target_dims)
    for ax in range(3):
        up[ax] *= np.float32(target_dims[ax] / dvf.dims[ax])
    return DVF(dims=target_dims, displacement=up)


def compose(global_dvf: DVF, local_dvf: DVF) -> DVF:
    """Functional composition: result(p) = g(p + l(p)) + l(p).

    Warping with the result approximates warping by g first, then by l.
    """
    if global_dvf.dims != local_dvf.dims:
        raise ValueError(f"dims mismatch: {global_dvf.dims} vs {local_dvf.dims}")
    dims = global_dvf.dims
    coords = identity_coords(dims) + local_dvf.displacement.reshape(3, -1)
    out = np.empty_like(local_dvf.displacement)
    for c in range(3):
        sampled = sample_trilinear(global_dvf.displacement[c], coords).reshape(dims)
        out[c] = sampled.astype(np.float32) + local_dvf.displacement[c]
    return DVF(dims=dims, displacement=out)


# --------------------------------------------------------------------------
# patch grid
# --------------------------------------------------------------------------

def _axis_starts(dim, patch, stride):
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def build_patch_grid(volume_dims, patch_size, overlap) -> PatchGrid:
    """Tile a volume with overlapping patches; the last start per axis is
    clamped so coverage is total."""
    volume_dims = tuple(int(d) for d in volume_dims)
    patch_size = tuple(int(p) for p in patch_size)
    overlap = tuple(int(o) for o in overlap)
    for d, p, o in zip(volume_dims, patch_size, overlap):
        if p > d:
            raise ValueError(f"patch size {patch_size} exceeds volume dims {volume_dims}")
        if o >= p:
            raise ValueError(f"overlap {overlap} must be smaller than patch {patch_size}")
    stride = tuple(p - o for p, o in zip(patch_size, overlap))
    axes = [_axis_starts(d, p, s) for d, p, s in zip(volume_dims, patch_size, stride)]
    starts = tuple(
        (x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]
    )
    return PatchGrid(patch_size=patch_size, stride=stride, starts=starts, volume_dims=volume_dims)


def extract_patch(arr: np.ndarray, start, size) -> np.ndarray:
    """Slice a (..., nx, ny, nz) array at a patch origin."""
    x, y, z = start
    px, py, pz = size
    return arr[..., x:x + px, y:y + py, z:z + pz]


def _taper_weights(patch_size) -> np.ndarray:
    """Separable per-voxel weight: 1 at the patch centre, 0.05 at faces."""
    floor = 0.05
    axes = []
    for p in patch_size:
        if p == 1:
            axes.append(np.ones(1, dtype=np.float64))
            continue
        centre = (p - 1) / 2.0
        i = np.arange(p, dtype=np.float64)
        axes.append(1.0 - (1.0 - floor) * np.abs(i - centre) / centre)
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def fuse_patches(patch_dvfs, grid: PatchGrid) -> DVF:
    """Blend per-patch fields into one whole-volume field.

    Each contribution is weighted by a linear taper that is highest at the
    patch centre, and the accumulated sum is renormalised per voxel.
    """
    if len(patch_dvfs) != len(grid.starts):
        raise ValueError(f"got {len(patch_dvfs)} patch fields for {len(grid.starts)} grid starts")
    w = _taper_weights(grid.patch_size)
    acc = np.zeros((3, *grid.volume_dims), dtype=np.float64)
    wsum = np.zeros(grid.volume_dims, dtype=np.float64)
    for dvf, start in zip(patch_dvfs, grid.starts):
        if dvf.dims != grid.patch_size:
            raise ValueError(f"patch field dims {dvf.dims} != grid patch size {grid.patch_size}")
        x, y, z = start
        px, py, pz = grid.patch_size
        acc[:, x:x + px, y:y + py, z:z + pz] += w * dvf.displacement.astype(np.float64)
        wsum[x:x + px, y:y + py, z:z + pz] += w
    fused = (acc / wsum).astype(np.float32)
    return DVF(dims=grid.volume_dims, displacement=fused)


# --------------------------------------------------------------------------
# DVF file I/O (stored in millimetres)
# --------------------------------------------------------------------------

def save_dvf(dvf: DVF, spacing, path) -> None:
    mm = dvf.displacement.astype(np.float64).copy()
    for ax in range(3):
        mm[ax] *= spacing[ax]
    write_container(path, mm.astype(np.float32), spacing)


def load_dvf(path):
    """Load a field container. Returns (DVF in voxel units, spacing)."""
    header, data = read_container(path)
    if header["channels"] != 3:
        raise DataError(f"expected 3 channels for a displacement field, got {header['channels']}")
    spacing = tuple(float(s) for s in header["spacing_mm"])
    vox = data.astype(np.float64)
    for ax in range(3):
        vox[ax] /= spacing[ax]
    return DVF(dims=tuple(int(d) for d in header["dims"]), displacement=vox.astype(np.float32)), spacing
