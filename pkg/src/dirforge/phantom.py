"""Synthetic abdomen-like phantoms with exact deformation ground truth.

The target image is an analytic function of physical position: an
ellipsoidal body at soft-tissue intensity over air, textured with seeded
smooth noise, with embedded bone ellipsoids and bright fiducial spheres.
The moving image is the same analytic scene resampled through the exact
inverse of the requested deformation, so the returned field registers
moving onto target by construction rather than by estimation.

Landmark pairs satisfy ``moving + field(moving) == target`` exactly: the
moving-side points are chosen on voxel centres and pushed through the
analytic field to place their target-side twins (and the fiducial
spheres).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .transform import DVF
from .volume import DataError, LandmarkSet, Volume

AIR_HU = -1000.0
TISSUE_HU = 0.0
BONE_HU = 700.0
RIB_HU = 620.0
FIDUCIAL_HU = 1200.0

# peak/sigma bound keeping |grad u| < 1 (max slope of a Gaussian is
# peak * exp(-1/2) / sigma, so 0.4 gives ~0.24, safely fold-free)
BUMP_PEAK_SIGMA_RATIO = 0.4


@dataclass(frozen=True)
class RigidShift:
    """Uniform displacement (mm) carrying every moving point to target."""

    shift_mm: tuple

    def displacement_mm(self, points: np.ndarray) -> np.ndarray:
        out = np.empty_like(points)
        for ax in range(3):
            out[ax] = self.shift_mm[ax]
        return out

    def lipschitz_bound(self) -> float:
        return 0.0


@dataclass(frozen=True)
class GaussianBump:
    """Local displacement with Gaussian falloff around a centre (mm)."""

    center_mm: tuple
    peak_mm: tuple
    sigma_mm: float

    def displacement_mm(self, points: np.ndarray) -> np.ndarray:
        d2 = np.zeros(points.shape[1], dtype=np.float64)
        for ax in range(3):
            d2 += (points[ax] - self.center_mm[ax]) ** 2
        env = np.exp(-d2 / (2.0 * self.sigma_mm ** 2))
        return np.stack([env * self.peak_mm[ax] for ax in range(3)])

    def lipschitz_bound(self) -> float:
        peak = float(np.linalg.norm(self.peak_mm))
        return peak * np.exp(-0.5) / self.sigma_mm


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    spacing: tuple
    seed: int
    deformation: tuple  # of RigidShift | GaussianBump, summed
    landmark_count: int = 8

    def __post_init__(self):
        if self.landmark_count < 4:
            raise DataError(f"landmark_count must be >= 4, got {self.landmark_count}")
        if min(self.dims) < 8:
            raise DataError(f"phantom dims must be >= 8 per axis, got {self.dims}")
        if min(self.spacing) <= 0:
            raise DataError(f"spacing must be > 0, got {self.spacing}")
        lip = 0.0
        for part in self.deformation:
            if isinstance(part, GaussianBump):
                peak = float(np.linalg.norm(part.peak_mm))
                if part.sigma_mm <= 0:
                    raise DataError("gaussian_bump sigma must be > 0")
                if peak > BUMP_PEAK_SIGMA_RATIO * part.sigma_mm + 1e-12:
                    raise DataError(
                        f"gaussian_bump peak {peak:.3f} mm exceeds "
                        f"{BUMP_PEAK_SIGMA_RATIO} * sigma = "
                        f"{BUMP_PEAK_SIGMA_RATIO * part.sigma_mm:.3f} mm"
                    )
            lip += part.lipschitz_bound()
        if lip >= 0.95:
            raise DataError(f"composite deformation too steep (Lipschitz bound {lip:.2f})")


def _field_mm(parts, points: np.ndarray) -> np.ndarray:
    out = np.zeros_like(points)
    for part in parts:
        out += part.displacement_mm(points)
    return out


def _inverse_field_mm(parts, points: np.ndarray, iters: int = 60) -> np.ndarray:
    """Compositional inverse displacement g with g(y) = -u(y + g(y))."""
    g = np.zeros_like(points)
    for _ in range(iters):
        g = -_field_mm(parts, points + g)
    return g


def _smooth_inside(rho: np.ndarray, width: float) -> np.ndarray:
    """1 inside the unit shell, 0 outside, smooth over [1-width, 1]."""
    t = np.clip((rho - (1.0 - width)) / width, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


class _Scene:
    """Analytic HU scene evaluated at arbitrary mm positions."""

    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        extent = np.array([d * s for d, s in zip(spec.dims, spec.spacing)])
        self.centre = extent * 0.5
        self.body_semi = np.array([0.42 * extent[0], 0.42 * extent[1], 0.46 * extent[2]])
        a = self.body_semi
        self.bones = [
            # (centre offset from body centre, semi-axes mm, HU)
            (np.array([0.0, 0.55 * a[1], 0.0]), np.array([0.26 * a[0], 0.26 * a[1], 0.72 * a[2]]), BONE_HU),
            (np.array([-0.62 * a[0], 0.30 * a[1], 0.0]), np.array([0.15 * a[0], 0.15 * a[1], 0.55 * a[2]]), RIB_HU),
            (np.array([0.62 * a[0], 0.30 * a[1], 0.0]), np.array([0.15 * a[0], 0.15 * a[1], 0.55 * a[2]]), RIB_HU),
        ]
        # seeded smooth texture: a handful of random plane waves
        n_waves = 8
        dirs = rng.standard_normal((n_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lam = rng.uniform(14.0, 40.0, size=n_waves)
        self.wave_k = dirs * (2.0 * np.pi / lam)[:, None]
        self.wave_phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
        self.wave_amp = rng.uniform(8.0, 28.0, size=n_waves)
        self.fiducials = []  # (centre mm, radius mm) appended later
        self.fiducial_radius = 2.2

    def _ellipsoid_rho(self, points, centre, semi):
        r2 = np.zeros(points.shape[1], dtype=np.float64)
        for ax in range(3):
            r2 += ((points[ax] - centre[ax]) / semi[ax]) ** 2
        return np.sqrt(r2)

    def body_rho(self, points):
        return self._ellipsoid_rho(points, self.centre, self.body_semi)

    def bone_rho_min(self, points):
        rho = None
        for off, semi, _ in self.bones:
            r = self._ellipsoid_rho(points, self.centre + off, semi)
            rho = r if rho is None else np.minimum(rho, r)
        return rho

    def hu(self, points: np.ndarray) -> np.ndarray:
        body_w = _smooth_inside(self.body_rho(points), width=0.08)
        tex = np.zeros(points.shape[1], dtype=np.float64)
        for k, ph, amp in zip(self.wave_k, self.wave_phase, self.wave_amp):
            tex += amp * np.cos(k[0] * points[0] + k[1] * points[1] + k[2] * points[2] + ph)
        value = AIR_HU + body_w * (TISSUE_HU + tex * body_w - AIR_HU)
        for off, semi, hu in self.bones:
            w = _smooth_inside(self._ellipsoid_rho(points, self.centre + off, semi), width=0.18)
            value = value + w * (hu - value)
        for centre, radius in self.fiducials:
            d = np.sqrt(((points - centre[:, None]) ** 2).sum(axis=0))
            w = _smooth_inside(d / radius, width=0.35)
            value = value + w * (FIDUCIAL_HU - value)
        return value


def _grid_points_mm(dims, spacing) -> np.ndarray:
    nx, ny, nz = dims
    gx, gy, gz = np.meshgrid(
        np.arange(nx, dtype=np.float64) * spacing[0],
        np.arange(ny, dtype=np.float64) * spacing[1],
        np.arange(nz, dtype=np.float64) * spacing[2],
        indexing="ij",
    )
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()])


def _place_landmarks(spec: PhantomSpec, scene: _Scene, rng: np.random.Generator):
    """Moving-side points on voxel centres in clear soft tissue; the
    target-side twin is the analytic image of each point."""
    spacing = np.array(spec.spacing)
    chosen_mov, chosen_tgt = [], []
    min_sep = 0.22 * float(min(scene.body_semi))
    attempts = 0
    while len(chosen_mov) < spec.landmark_count:
        attempts += 1
        if attempts > 20000:
            raise DataError("could not place landmarks; body too small for landmark_count")
        idx = np.array([rng.integers(1, d - 1) for d in spec.dims], dtype=np.float64)
        pos = (idx * spacing).reshape(3, 1)
        if scene.body_rho(pos)[0] > 0.72:
            continue
        if scene.bone_rho_min(pos)[0] < 1.45:
            continue
        tgt = pos[:, 0] + _field_mm(spec.deformation, pos)[:, 0]
        if scene.body_rho(tgt.reshape(3, 1))[0] > 0.80:
            continue
        if scene.bone_rho_min(tgt.reshape(3, 1))[0] < 1.35:
            continue
        if any(np.linalg.norm(pos[:, 0] - p) < min_sep for p in chosen_mov):
            continue
        chosen_mov.append(pos[:, 0])
        chosen_tgt.append(tgt)
    entries_mov = tuple(
        (f"L{i:02d}", (p[0], p[1], p[2])) for i, p in enumerate(chosen_mov)
    )
    entries_tgt = tuple(
        (f"L{i:02d}", (p[0], p[1], p[2])) for i, p in enumerate(chosen_tgt)
    )
    return LandmarkSet(entries=entries_mov), LandmarkSet(entries=entries_tgt)


def make_phantom(spec: PhantomSpec):
    """Build (moving, target, truth_dvf, landmarks_moving, landmarks_target).

    Voxel values are quantised to whole HU, matching scanner output.
    The truth field is the analytic deformation sampled on the grid in
    voxel units; warping moving by it reproduces target up to
    interpolation, and mapping each moving landmark through it lands on
    its target twin exactly.
    """
    rng = np.random.default_rng(spec.seed)
    scene = _Scene(spec, rng)
    lm_moving, lm_target = _place_landmarks(spec, scene, rng)
    for _, pos in lm_target.entries:
        scene.fiducials.append((np.array(pos), scene.fiducial_radius))

    pts = _grid_points_mm(spec.dims, spec.spacing)
    target_vals = scene.hu(pts)
    inv = _inverse_field_mm(spec.deformation, pts)
    moving_vals = scene.hu(pts + inv)

    def _quantise(vals):
        # + 0.0 normalises IEEE negative zeros so containers are byte-stable
        return (np.rint(vals) + 0.0).astype(np.float32).reshape(spec.dims)

    target = Volume(dims=spec.dims, spacing=spec.spacing, voxels=_quantise(target_vals))
    moving = Volume(dims=spec.dims, spacing=spec.spacing, voxels=_quantise(moving_vals))

    u_mm = _field_mm(spec.deformation, pts)
    disp = np.empty((3, *spec.dims), dtype=np.float32)
    for ax in range(3):
        disp[ax] = (u_mm[ax] / spec.spacing[ax]).astype(np.float32).reshape(spec.dims)
    truth = DVF(dims=spec.dims, displacement=disp)
    return moving, target, truth, lm_moving, lm_target


def field_mm_at(spec: PhantomSpec, points_mm: np.ndarray) -> np.ndarray:
    """Evaluate the analytic deformation (mm) at (3, N) mm positions."""
    return _field_mm(spec.deformation, points_mm.astype(np.float64))


# --------------------------------------------------------------------------
# JSON spec parsing
# --------------------------------------------------------------------------

def _part_from_json(obj) -> object:
    kind = obj.get("type")
    if kind == "rigid_shift":
        return RigidShift(shift_mm=tuple(float(v) for v in obj["shift_mm"]))
    if kind == "gaussian_bump":
        return GaussianBump(
            center_mm=tuple(float(v) for v in obj["center_mm"]),
            peak_mm=tuple(float(v) for v in obj["peak_mm"]),
            sigma_mm=float(obj["sigma_mm"]),
        )
    raise DataError(f"unknown deformation type: {kind!r}")


def spec_from_json(text: str) -> PhantomSpec:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"malformed phantom spec JSON: {e}") from e
    try:
        deform = obj["deformation"]
        if deform.get("type") == "composite":
            parts = tuple(_part_from_json(p) for p in deform["parts"])
        else:
            parts = (_part_from_json(deform),)
        return PhantomSpec(
            dims=tuple(int(d) for d in obj["dims"]),
            spacing=tuple(float(s) for s in obj["spacing_mm"]),
            seed=int(obj["seed"]),
            deformation=parts,
            landmark_count=int(obj.get("landmark_count", 8)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid phantom spec: {e}") from e
