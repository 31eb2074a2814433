"""Volumetric data containers and file I/O.

A volume is a 3D scalar grid of Hounsfield units with physical voxel
spacing. On disk every grid (volume, mask, displacement field) is a pair
of files: ``<name>.json`` with the header and ``<name>.bin`` with the
little-endian float32 payload, stored channel-major and x-fastest.
Landmarks are plain CSV in physical millimetres, with the origin at the
centre of voxel (0, 0, 0).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np


class DataError(Exception):
    """Raised for malformed files, headers, or user-supplied specs."""


def _atomic_write_bytes(path, payload: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _atomic_write_text(path, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


@dataclass(frozen=True)
class Volume:
    """Scalar HU grid. ``voxels`` has shape (nx, ny, nz), float32."""

    dims: tuple
    spacing: tuple
    voxels: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        if self.voxels.shape != (nx, ny, nz):
            raise ValueError(f"voxel grid {self.voxels.shape} does not match dims {self.dims}")
        if self.voxels.dtype != np.float32:
            raise ValueError("voxels must be float32")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxels contain non-finite values")

    @property
    def extent_mm(self):
        return tuple(d * s for d, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class Mask:
    """Boolean grid tied to a volume's dims."""

    dims: tuple
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.shape != tuple(self.dims):
            raise ValueError(f"mask grid {self.bits.shape} does not match dims {self.dims}")
        if self.bits.dtype != np.bool_:
            raise ValueError("mask bits must be boolean")

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class LandmarkSet:
    """Named points in physical mm coordinates."""

    entries: tuple  # of (id, (x_mm, y_mm, z_mm))

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("landmark ids must be unique")

    def positions(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries], dtype=np.float64).reshape(-1, 3)

    def ids(self):
        return [e[0] for e in self.entries]

    def __len__(self):
        return len(self.entries)


def threshold_mask(vol: Volume, hu_min: float) -> Mask:
    """Mask of voxels strictly above ``hu_min`` HU."""
    return Mask(dims=vol.dims, bits=vol.voxels > np.float32(hu_min))


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------

def _paths(path):
    """Resolve a container stem: accepts 'name', 'name.json' or 'name.bin'."""
    stem, ext = os.path.splitext(path)
    if ext not in (".json", ".bin"):
        stem = path
    return stem + ".json", stem + ".bin"


def write_container(path, data: np.ndarray, spacing) -> None:
    """Write a (C, nx, ny, nz) float32 array as a header/payload pair."""
    if data.ndim == 3:
        data = data[None]
    channels, nx, ny, nz = data.shape
    header = {
        "dims": [int(nx), int(ny), int(nz)],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": "f32",
        "channels": int(channels),
    }
    payload = b"".join(
        np.ascontiguousarray(data[c].astype(np.float32, copy=False)).ravel(order="F")
        .astype("<f4").tobytes()
        for c in range(channels)
    )
    json_path, bin_path = _paths(path)
    _atomic_write_bytes(bin_path, payload)
    _atomic_write_text(json_path, json.dumps(header, sort_keys=True) + "\n")


def read_container(path):
    """Read a header/payload pair. Returns (header dict, (C,nx,ny,nz) f32)."""
    json_path, bin_path = _paths(path)
    if not os.path.exists(json_path):
        raise DataError(f"missing header file: {json_path}")
    if not os.path.exists(bin_path):
        raise DataError(f"missing payload file: {bin_path}")
    try:
        with open(json_path) as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"malformed header {json_path}: {e}") from e
    for key in ("dims", "spacing_mm", "dtype", "channels"):
        if key not in header:
            raise DataError(f"header missing field '{key}': {json_path}")
    if header["dtype"] != "f32":
        raise DataError(f"unsupported dtype '{header['dtype']}' (only f32)")
    nx, ny, nz = (int(d) for d in header["dims"])
    channels = int(header["channels"])
    with open(bin_path, "rb") as f:
        payload = f.read()
    expected = channels * nx * ny * nz * 4
    if len(payload) != expected:
        raise DataError(
            f"payload size mismatch for {bin_path}: got {len(payload)} bytes, expected {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    data = np.empty((channels, nx, ny, nz), dtype=np.float32)
    per = nx * ny * nz
    for c in range(channels):
        data[c] = flat[c * per:(c + 1) * per].reshape((nx, ny, nz), order="F")
    if not np.all(np.isfinite(data)):
        raise DataError(f"payload contains non-finite values: {bin_path}")
    return header, data


def save_volume(vol: Volume, path) -> None:
    write_container(path, vol.voxels[None], vol.spacing)


def load_volume(path) -> Volume:
    header, data = read_container(path)
    if header["channels"] != 1:
        raise DataError(f"expected 1 channel for a volume, got {header['channels']}")
    return Volume(
        dims=tuple(int(d) for d in header["dims"]),
        spacing=tuple(float(s) for s in header["spacing_mm"]),
        voxels=data[0],
    )


def save_mask(mask: Mask, spacing, path) -> None:
    write_container(path, mask.bits.astype(np.float32)[None], spacing)


def load_mask(path) -> Mask:
    header, data = read_container(path)
    if header["channels"] != 1:
        raise DataError(f"expected 1 channel for a mask, got {header['channels']}")
    return Mask(dims=tuple(int(d) for d in header["dims"]), bits=data[0] > 0.5)


# --------------------------------------------------------------------------
# landmarks
# --------------------------------------------------------------------------

def save_landmarks(lms: LandmarkSet, path) -> None:
    rows = ["id,x_mm,y_mm,z_mm"]
    for lid, pos in lms.entries:
        rows.append(f"{lid},{pos[0]:.6f},{pos[1]:.6f},{pos[2]:.6f}")
    _atomic_write_text(path, "\n".join(rows) + "\n")


def load_landmarks(path) -> LandmarkSet:
    if not os.path.exists(path):
        raise DataError(f"missing landmark file: {path}")
    entries = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x_mm", "y_mm", "z_mm"]:
            raise DataError(f"bad landmark header in {path}: {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"bad landmark row in {path}: {row}")
            entries.append((row[0], (float(row[1]), float(row[2]), float(row[3]))))
    return LandmarkSet(entries=tuple(entries))
