import numpy as np
import pytest

from dirforge.metrics import mae, map_landmarks
from dirforge.phantom import (GaussianBump, PhantomSpec, RigidShift,
                              field_mm_at, make_phantom, spec_from_json)
from dirforge.transform import warp
from dirforge.volume import DataError, threshold_mask

SPACING = (0.9, 0.9, 2.0)


def rigid_spec(shift=(1.8, 0.0, 0.0), dims=(24, 24, 16), seed=0, count=4):
    return PhantomSpec(dims=dims, spacing=SPACING, seed=seed,
                       deformation=(RigidShift(shift),), landmark_count=count)


def bump_spec(dims=(32, 32, 16), seed=0):
    centre = (0.9 * dims[0] / 2, 0.9 * dims[1] / 2, 2.0 * dims[2] / 2)
    return PhantomSpec(dims=dims, spacing=SPACING, seed=seed,
                       deformation=(GaussianBump(center_mm=centre,
                                                 peak_mm=(3.0, 0.0, 0.0),
                                                 sigma_mm=12.0),),
                       landmark_count=4)


def test_identity_deformation_bit_identical():
    moving, target, truth, lmm, lmt = make_phantom(rigid_spec(shift=(0.0, 0.0, 0.0)))
    assert np.array_equal(moving.voxels, target.voxels)
    assert np.all(truth.displacement == 0.0)
    assert np.allclose(lmm.positions(), lmt.positions())


def test_determinism_bit_identical():
    a = make_phantom(rigid_spec(seed=5))
    b = make_phantom(rigid_spec(seed=5))
    assert np.array_equal(a[0].voxels, b[0].voxels)
    assert np.array_equal(a[1].voxels, b[1].voxels)
    assert np.array_equal(a[2].displacement, b[2].displacement)
    assert a[3].entries == b[3].entries
    c = make_phantom(rigid_spec(seed=6))
    assert not np.array_equal(a[1].voxels, c[1].voxels)


def test_rigid_shift_mm_to_voxel():
    _, _, truth, _, _ = make_phantom(rigid_spec(shift=(1.8, 0.0, 0.0)))
    assert np.allclose(truth.displacement[0], 2.0)
    assert np.all(truth.displacement[1:] == 0.0)


def test_gaussian_bump_matches_closed_form_everywhere():
    spec = bump_spec()
    _, _, truth, _, _ = make_phantom(spec)
    bump = spec.deformation[0]
    nx, ny, nz = spec.dims
    gx, gy, gz = np.meshgrid(np.arange(nx) * SPACING[0], np.arange(ny) * SPACING[1],
                             np.arange(nz) * SPACING[2], indexing="ij")
    d2 = ((gx - bump.center_mm[0]) ** 2 + (gy - bump.center_mm[1]) ** 2
          + (gz - bump.center_mm[2]) ** 2)
    want_dx_mm = bump.peak_mm[0] * np.exp(-d2 / (2 * bump.sigma_mm ** 2))
    assert np.allclose(truth.displacement[0] * SPACING[0], want_dx_mm, atol=1e-4)
    assert np.all(truth.displacement[1] == 0.0)
    # centre lies on a voxel centre, so the max hits the peak exactly
    assert np.abs(truth.displacement[0] * SPACING[0]).max() == pytest.approx(3.0, abs=1e-3)


def test_landmark_consistency_through_truth_field():
    for spec in (rigid_spec(), bump_spec()):
        moving, target, truth, lmm, lmt = make_phantom(spec)
        mapped = map_landmarks(lmm, truth, spec.spacing)
        err_mm = np.linalg.norm(mapped.positions() - lmt.positions(), axis=1)
        assert err_mm.max() <= 1e-4 * min(spec.spacing)  # within 1e-4 voxel


def test_truth_field_registers_moving_onto_target():
    spec = rigid_spec(dims=(32, 32, 16))
    moving, target, truth, _, _ = make_phantom(spec)
    body = threshold_mask(target, -300.0)
    before = mae(moving, target, body)
    after = mae(warp(moving, truth), target, body)
    assert after < 0.2 * before
    assert after < 10.0  # interpolation + HU quantisation only


def test_phantom_layout_and_intensities():
    spec = rigid_spec(dims=(32, 32, 16), count=5)
    moving, target, truth, lmm, lmt = make_phantom(spec)
    assert target.voxels[0, 0, 0] == -1000.0  # air corner
    assert threshold_mask(target, -300.0).count > 0.2 * np.prod(spec.dims)
    assert threshold_mask(target, 300.0).count > 0  # bone present
    assert target.voxels.max() >= 800.0  # fiducial present
    assert np.all(target.voxels == np.rint(target.voxels))  # integer HU
    assert len(lmm) == 5 and len(lmt) == 5
    extent = np.array(target.extent_mm)
    for lms in (lmm, lmt):
        pos = lms.positions()
        assert np.all(pos >= 0.0) and np.all(pos <= extent)


def test_fiducials_visible_at_target_landmarks():
    spec = rigid_spec(dims=(32, 32, 16))
    _, target, _, _, lmt = make_phantom(spec)
    for _, pos in lmt.entries:
        idx = tuple(int(round(p / s)) for p, s in zip(pos, SPACING))
        assert target.voxels[idx] >= 800.0


def test_truth_fields_are_fold_free():
    from dirforge.metrics import jacobian_report
    for spec in (rigid_spec(), bump_spec()):
        _, _, truth, _, _ = make_phantom(spec)
        jac_min, fold = jacobian_report(truth)
        assert jac_min > 0.0
        assert fold == 0.0


def test_bump_peak_bound_enforced():
    with pytest.raises(DataError, match="exceeds"):
        PhantomSpec(dims=(16, 16, 16), spacing=SPACING, seed=0,
                    deformation=(GaussianBump((10, 10, 10), (6.0, 0, 0), 12.0),),
                    landmark_count=4)


def test_composite_deformation_sums_fields():
    parts = (RigidShift((1.0, 0.5, 0.0)), GaussianBump((10, 10, 10), (2.0, 0, 0), 10.0))
    spec = PhantomSpec(dims=(24, 24, 12), spacing=SPACING, seed=1,
                       deformation=parts, landmark_count=4)
    pts = np.array([[10.0, 10.0, 10.0], [0.0, 0.0, 0.0]]).T
    got = field_mm_at(spec, pts)
    assert got[0, 0] == pytest.approx(3.0)   # shift + bump peak
    assert got[1, 0] == pytest.approx(0.5)
    assert got[0, 1] == pytest.approx(1.0 + 2.0 * np.exp(-300.0 / 200.0), rel=1e-6)


def test_composite_too_steep_rejected():
    parts = tuple(GaussianBump((10, 10, 10), (4.0, 0, 0), 10.0) for _ in range(5))
    with pytest.raises(DataError, match="steep"):
        PhantomSpec(dims=(16, 16, 16), spacing=SPACING, seed=0,
                    deformation=parts, landmark_count=4)


def test_landmark_count_minimum():
    with pytest.raises(DataError, match="landmark_count"):
        rigid_spec(count=3)


def test_spec_json_parsing():
    text = """{
      "dims": [24, 24, 16], "spacing_mm": [0.9, 0.9, 2.0], "seed": 3,
      "landmark_count": 6,
      "deformation": {"type": "rigid_shift", "shift_mm": [1.8, 0, 0]}
    }"""
    spec = spec_from_json(text)
    assert spec.seed == 3 and spec.landmark_count == 6
    assert isinstance(spec.deformation[0], RigidShift)

    comp = """{
      "dims": [24, 24, 16], "spacing_mm": [0.9, 0.9, 2.0], "seed": 0,
      "deformation": {"type": "composite", "parts": [
        {"type": "rigid_shift", "shift_mm": [1, 0, 0]},
        {"type": "gaussian_bump", "center_mm": [10, 10, 10],
         "peak_mm": [2, 0, 0], "sigma_mm": 10.0}
      ]}
    }"""
    assert len(spec_from_json(comp).deformation) == 2

    with pytest.raises(DataError, match="unknown deformation"):
        spec_from_json('{"dims": [8,8,8], "spacing_mm": [1,1,1], "seed": 0, '
                       '"deformation": {"type": "twist"}}')
    with pytest.raises(DataError, match="malformed"):
        spec_from_json("{nope")
