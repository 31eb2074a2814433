"""Registration quality metrics: landmark error, masked intensity error
and correlation, bone-mask overlap, and a Jacobian-determinant check for
folding.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .transform import DVF, sample_trilinear
from .volume import (LandmarkSet, Mask, Volume, _atomic_write_text,
                     threshold_mask)

BODY_HU_DEFAULT = -300.0
BONE_HU_DEFAULT = 300.0


def map_landmarks(lms: LandmarkSet, dvf: DVF, spacing) -> LandmarkSet:
    """Carry each landmark through the field: p + d(p), in millimetres.

    The displacement is sampled trilinearly at the landmark's voxel
    position and converted back to mm with the grid spacing.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    pos = lms.positions()  # (K, 3) mm
    coords = (pos / spacing).T  # (3, K) voxel units
    mapped = pos.copy()
    for ax in range(3):
        disp_vox = sample_trilinear(dvf.displacement[ax], coords)
        mapped[:, ax] += disp_vox.astype(np.float64) * spacing[ax]
    entries = tuple(
        (lid, (p[0], p[1], p[2])) for lid, p in zip(lms.ids(), mapped)
    )
    return LandmarkSet(entries=entries)


def tre(deformed_landmarks: LandmarkSet, target_landmarks: LandmarkSet) -> np.ndarray:
    """Euclidean distance in mm per matched landmark id."""
    d = {lid: np.asarray(p, dtype=np.float64) for lid, p in deformed_landmarks.entries}
    t = {lid: np.asarray(p, dtype=np.float64) for lid, p in target_landmarks.entries}
    if set(d) != set(t):
        raise ValueError(
            f"landmark ids differ: {sorted(set(d) ^ set(t))}"
        )
    return np.array([np.linalg.norm(d[lid] - t[lid]) for lid in sorted(d)], dtype=np.float64)


def mae(deformed: Volume, target: Volume, body: Mask) -> float:
    """Mean absolute HU difference over the body mask."""
    if deformed.dims != target.dims or deformed.dims != body.dims:
        raise ValueError("mae inputs must share dims")
    if body.count == 0:
        raise ValueError("mae is undefined on an empty mask")
    diff = np.abs(deformed.voxels.astype(np.float64) - target.voxels.astype(np.float64))
    return float(diff[body.bits].mean())


def ncc_metric(deformed: Volume, target: Volume, body: Mask) -> float:
    """Pearson correlation of HU values over the body mask."""
    if deformed.dims != target.dims or deformed.dims != body.dims:
        raise ValueError("ncc inputs must share dims")
    if body.count == 0:
        raise ValueError("ncc is undefined on an empty mask")
    a = deformed.voxels[body.bits].astype(np.float64)
    b = target.voxels[body.bits].astype(np.float64)
    ac = a - a.mean()
    bc = b - b.mean()
    va = (ac * ac).sum()
    vb = (bc * bc).sum()
    if va == 0.0 or vb == 0.0:
        raise ValueError("ncc is undefined for zero masked variance")
    return float((ac * bc).sum() / np.sqrt(va * vb))


def dsc(mask_d: Mask, mask_t: Mask) -> float:
    """Overlap score 2|A.B| / (|A| + |B|)."""
    if mask_d.dims != mask_t.dims:
        raise ValueError("dsc masks must share dims")
    na, nb = mask_d.count, mask_t.count
    if na + nb == 0:
        raise ValueError("dsc is undefined for two empty masks")
    inter = int(np.logical_and(mask_d.bits, mask_t.bits).sum())
    return 2.0 * inter / (na + nb)


def jacobian_report(dvf: DVF):
    """(min determinant, folded fraction) of I + grad(u), central
    differences over interior voxels."""
    dims = dvf.dims
    if min(dims) < 3:
        return 1.0, 0.0
    u = dvf.displacement.astype(np.float64)
    inner = (slice(1, -1), slice(1, -1), slice(1, -1))
    jac = np.empty((3, 3, dims[0] - 2, dims[1] - 2, dims[2] - 2))
    for comp in range(3):
        grad = np.gradient(u[comp], axis=(0, 1, 2))
        for ax in range(3):
            jac[comp, ax] = grad[ax][inner]
        jac[comp, comp] += 1.0
    det = (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )
    return float(det.min()), float((det <= 0.0).mean())


@dataclass(frozen=True)
class MetricReport:
    tre_per_landmark: tuple
    tre_mean: float
    tre_std: float
    mae: float
    ncc: float
    dsc: float
    jacobian_min: float
    fold_fraction: float

    def __post_init__(self):
        if not (-1.0 - 1e-9 <= self.ncc <= 1.0 + 1e-9):
            raise ValueError(f"ncc out of range: {self.ncc}")
        if not (0.0 <= self.dsc <= 1.0):
            raise ValueError(f"dsc out of range: {self.dsc}")
        if self.mae < 0 or self.tre_mean < 0:
            raise ValueError("mae and tre must be non-negative")


def evaluate_pair(deformed: Volume, target: Volume, dvf: DVF,
                  landmarks_moving: LandmarkSet, landmarks_target: LandmarkSet,
                  body_hu: float = BODY_HU_DEFAULT,
                  bone_hu: float = BONE_HU_DEFAULT) -> MetricReport:
    """All four metrics plus the folding check for one registered pair.

    The body mask comes from the target volume and is applied to both
    images; bone masks are thresholded per image.
    """
    mapped = map_landmarks(landmarks_moving, dvf, target.spacing)
    errors = tre(mapped, landmarks_target)
    body = threshold_mask(target, body_hu)
    jac_min, fold = jacobian_report(dvf)
    return MetricReport(
        tre_per_landmark=tuple(float(e) for e in errors),
        tre_mean=float(errors.mean()),
        tre_std=float(errors.std()),
        mae=mae(deformed, target, body),
        ncc=ncc_metric(deformed, target, body),
        dsc=dsc(threshold_mask(deformed, bone_hu), threshold_mask(target, bone_hu)),
        jacobian_min=jac_min,
        fold_fraction=fold,
    )


REPORT_CSV_HEADER = "fraction,tre_mean,tre_std,mae,ncc,dsc,jac_min,fold_frac"


def _report_row(label, tre_mean, tre_std, mae_v, ncc_v, dsc_v, jac_min, fold) -> str:
    return (f"{label},{tre_mean:.6f},{tre_std:.6f},{mae_v:.6f},"
            f"{ncc_v:.6f},{dsc_v:.6f},{jac_min:.6f},{fold:.6f}")


def report_csv(reports: dict) -> str:
    """CSV with one row per fraction label plus an overall row."""
    lines = [REPORT_CSV_HEADER]
    items = list(reports.items())
    for label, r in items:
        lines.append(_report_row(label, r.tre_mean, r.tre_std, r.mae, r.ncc,
                                 r.dsc, r.jacobian_min, r.fold_fraction))
    all_tre = np.concatenate([np.asarray(r.tre_per_landmark) for _, r in items])
    lines.append(_report_row(
        "overall", all_tre.mean(), all_tre.std(),
        np.mean([r.mae for _, r in items]),
        np.mean([r.ncc for _, r in items]),
        np.mean([r.dsc for _, r in items]),
        np.min([r.jacobian_min for _, r in items]),
        np.mean([r.fold_fraction for _, r in items]),
    ))
    return "\n".join(lines) + "\n"


def write_report(reports: dict, stem: str, extra: dict = None) -> None:
    _atomic_write_text(stem + ".csv", report_csv(reports))
    payload = {
        "fractions": {label: asdict(r) for label, r in reports.items()},
    }
    if extra:
        payload.update(extra)
    _atomic_write_text(stem + ".json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
