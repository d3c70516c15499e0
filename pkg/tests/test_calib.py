import csv

import numpy as np
import pytest

from periscope.errors import ShapeError
from periscope.models.calib import CalibConfig
from periscope.models.scene import SceneSpec
from periscope.stages.calib import block_averages, calibrate, mae_total, write_trace_csv
from periscope.stages.synthgen import render


def test_block_averages_row_major():
    image = np.arange(16, dtype=np.float64).reshape(4, 4)
    np.testing.assert_allclose(block_averages(image, 2), [2.5, 4.5, 10.5, 12.5])


def test_block_averages_single_block_is_mean():
    image = np.random.default_rng(0).uniform(0, 255, (8, 8))
    assert block_averages(image, 1)[0] == pytest.approx(image.mean())


@pytest.mark.parametrize("n", [0, 3])
def test_block_grid_must_divide(n):
    with pytest.raises(ShapeError):
        block_averages(np.zeros((8, 8)), n)


def test_mae_total():
    image = np.random.default_rng(1).uniform(0, 200, (16, 16))
    assert mae_total(image, image, 4) == 0.0
    assert mae_total(image, image + 3.0, 4) == pytest.approx(3.0)


def test_mae_total_shape_mismatch():
    with pytest.raises(ShapeError):
        mae_total(np.zeros((8, 8)), np.zeros((16, 16)), 2)


def test_calibration_stops_when_already_matched():
    spec = SceneSpec(theta_noise=1.0)
    target = render(spec, 64).image
    result = calibrate(target, spec, CalibConfig())
    assert result.converged
    assert len(result.trace) == 1
    assert result.mae_total == 0.0
    assert result.spec.theta_light == spec.theta_light


def test_calibration_reduces_block_error():
    target = render(SceneSpec(theta_light=4.0e5, theta_noise=2.0), 64).image
    spec0 = SceneSpec(theta_light=3.0e5, theta_noise=1.0)
    result = calibrate(target, spec0, CalibConfig(max_steps=40))
    assert result.mae_total < result.trace[0].mae_total
    assert result.spec.theta_light > 3.0e5
    assert result.max_block_error >= result.mae_total
    assert [s.step for s in result.trace] == list(range(len(result.trace)))


def test_calibration_rejects_non_square_target():
    with pytest.raises(ShapeError):
        calibrate(np.zeros((64, 32)), SceneSpec(), CalibConfig())


def test_calibration_rejects_indivisible_grid():
    with pytest.raises(ShapeError):
        calibrate(np.zeros((60, 60)), SceneSpec(), CalibConfig(block_grid=8))


def test_trace_csv(tmp_path):
    spec = SceneSpec()
    result = calibrate(render(spec, 64).image, spec, CalibConfig())
    path = tmp_path / "out" / "trace.csv"
    write_trace_csv(path, result.trace)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "theta_noise", "theta_light", "mae_total"]
    assert len(rows) == len(result.trace) + 1
    assert float(rows[1][2]) == spec.theta_light


def test_percent_properties():
    spec = SceneSpec()
    result = calibrate(render(spec, 64).image, spec, CalibConfig())
    assert result.mae_pct == 0.0
    assert result.max_block_pct == 0.0
