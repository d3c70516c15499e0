import numpy as np
import pytest

from periscope.errors import MeasurementError, ShapeError
from periscope.models.camera import CameraIntrinsics
from periscope.models.scene import PupilSpec, SceneSpec
from periscope.stages.measurement import (
    back_project,
    back_project_coords,
    boundary_mask,
    edge_points,
    fit_circle,
    fit_plane,
    measure_pupil,
    project,
    region_mae,
)
from periscope.stages.synthgen import ground_truth_segmentation, render

INTR = CameraIntrinsics(fx=100, fy=100, cx=128, cy=128)


def dilate(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def oracle(diameter=4.0, resolution=256):
    spec = SceneSpec(pupil=PupilSpec(diameter_mm=diameter))
    pair = render(spec, resolution)
    return pair.depth, ground_truth_segmentation(spec, resolution).pupil_mask, pair.intrinsics


# ── back-projection ───────────────────────────────────────────


def test_principal_point_lies_on_axis():
    depth = np.full((256, 256), 50.0)
    points, valid = back_project(depth, INTR, [(128, 128)])
    np.testing.assert_allclose(points[0], [0.0, 0.0, 50.0])
    assert valid.all()


def test_off_axis_pixel():
    depth = np.full((256, 256), 50.0)
    points, _ = back_project(depth, INTR, [(228, 128)])
    np.testing.assert_allclose(points[0], [50.0, 0.0, 50.0])


def test_scale_factor_scales_points():
    depth = np.full((256, 256), 30.0)
    pixels = [(10, 20), (200, 40)]
    base, _ = back_project(depth, INTR, pixels)
    doubled, _ = back_project(depth, INTR.model_copy(update={"s": 2.0}), pixels)
    np.testing.assert_allclose(doubled, 2 * base)


def test_round_trip_through_projection():
    rng = np.random.default_rng(0)
    xs, ys = rng.uniform(0, 255, 10_000), rng.uniform(0, 255, 10_000)
    depths = rng.uniform(20, 90, 10_000)
    points = back_project_coords(xs, ys, depths, INTR)
    pixels = project(INTR, points)
    assert np.max(np.abs(pixels - np.stack([xs, ys], axis=-1))) < 1e-9


def test_nonpositive_depth_is_invalid():
    depth = np.full((8, 8), 40.0)
    depth[2, 3] = 0.0
    small = CameraIntrinsics(fx=8, fy=8, cx=3.5, cy=3.5, width=8, height=8)
    points, valid = back_project(depth, small, [(3, 2), (4, 4)])
    assert valid.tolist() == [False, True]
    assert np.isnan(points[0]).all()


def test_pixel_outside_map():
    with pytest.raises(ShapeError):
        back_project(np.ones((8, 8)), INTR, [(8, 0)])


# ── boundary and fitting ──────────────────────────────────────


def test_boundary_of_square():
    mask = np.zeros((7, 7), dtype=bool)
    mask[1:6, 1:6] = True
    boundary = boundary_mask(mask)
    assert boundary.sum() == 16
    assert not boundary[3, 3]


def test_edge_points_sit_on_cracks():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    xs, ys, ds = edge_points(np.full((5, 5), 10.0), mask)
    assert sorted(zip(xs.tolist(), ys.tolist())) == [(1.5, 2.0), (2.0, 1.5), (2.0, 2.5), (2.5, 2.0)]
    assert np.all(ds == 10.0)


def test_fit_circle_exact():
    t = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    xy = np.column_stack([3 + 2.5 * np.cos(t), -1 + 2.5 * np.sin(t)])
    centre, radius, rms = fit_circle(xy)
    np.testing.assert_allclose(centre, [3, -1], atol=1e-9)
    assert radius == pytest.approx(2.5)
    assert rms < 1e-9


def test_fit_plane_rejects_collinear():
    points = np.column_stack([np.arange(10.0), 2 * np.arange(10.0), np.full(10, 40.0)])
    with pytest.raises(MeasurementError, match="collinear"):
        fit_plane(points)


def test_tiny_mask_rejected():
    mask = np.zeros((16, 16), dtype=bool)
    mask[5:8, 5:8] = True
    with pytest.raises(MeasurementError):
        measure_pupil(np.full((16, 16), 40.0), mask, CameraIntrinsics.default(16))


def test_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        measure_pupil(np.ones((8, 8)), np.ones((8, 9), dtype=bool), INTR)


# ── pupil measurement ─────────────────────────────────────────


def test_pupil_diameter_from_ground_truth_depth():
    depth, mask, intr = oracle(4.0)
    result = measure_pupil(depth, mask, intr)
    assert result.diameter_mm == pytest.approx(4.0, abs=0.10)
    assert result.n_boundary_points > 20


@pytest.mark.parametrize("diameter", [3.0, 5.5, 7.0])
def test_pupil_within_one_footprint(diameter):
    depth, mask, intr = oracle(diameter)
    footprint = intr.footprint_mm(float(depth[mask].mean()))
    assert abs(measure_pupil(depth, mask, intr).diameter_mm - diameter) <= footprint


def test_dilated_mask_grows_by_two_footprints():
    depth, mask, intr = oracle(4.0)
    footprint = intr.footprint_mm(float(depth[mask].mean()))
    base = measure_pupil(depth, mask, intr).diameter_mm
    grown = measure_pupil(depth, dilate(mask), intr).diameter_mm
    assert 1.5 * footprint <= grown - base <= 3.0 * footprint


def test_measurement_invariant_to_rot90():
    depth, mask, intr = oracle(4.0)
    straight = measure_pupil(depth, mask, intr).diameter_mm
    turned = measure_pupil(np.rot90(depth), np.rot90(mask), intr).diameter_mm
    assert turned == pytest.approx(straight, rel=1e-9)


# ── region error ──────────────────────────────────────────────


def test_region_mae():
    gt = np.full((4, 4), 50.0)
    pred = gt.copy()
    pred[:2] += 1.0
    masks = {
        "top": np.arange(16).reshape(4, 4) < 8,
        "bottom": np.arange(16).reshape(4, 4) >= 8,
        "empty": np.zeros((4, 4), dtype=bool),
    }
    out = region_mae(pred, gt, masks)
    assert set(out) == {"top", "bottom"}
    assert (out["top"].mean_mm, out["top"].std_mm, out["top"].n_pixels) == (1.0, 0.0, 8)
    assert out["bottom"].mean_mm == 0.0


def test_region_mae_shape_mismatch():
    with pytest.raises(ShapeError):
        region_mae(np.ones((2, 2)), np.ones((3, 3)), {})
