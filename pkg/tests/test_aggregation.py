import numpy as np
import pytest

from periscope.errors import AggregationError
from periscope.models.pipeline import GateConfig
from periscope.stages.aggregation import aggregate_depths

MAD = GateConfig(outlier_mode="mad")
TWO_SIGMA = GateConfig(outlier_mode="two-sigma")


def noisy_maps(k=8, shape=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(30, 70, shape)
    return [base + rng.normal(0, 0.001, shape) for _ in range(k)]


def test_mad_rejects_corrupted_map():
    maps = noisy_maps()
    clean = np.mean(maps[1:], axis=0)
    maps[0] = maps[0] + 10.0
    result = aggregate_depths(maps, MAD)
    assert np.max(np.abs(result.depth - clean)) < 0.01
    assert not result.kept[0].any()
    assert result.n_outliers_excluded >= maps[0].size


def test_two_sigma_mode():
    maps = noisy_maps()
    maps[3] = maps[3] - 10.0
    result = aggregate_depths(maps, TWO_SIGMA)
    assert not result.kept[3].any()
    clean = np.mean([m for i, m in enumerate(maps) if i != 3], axis=0)
    assert np.max(np.abs(result.depth - clean)) < 0.01


@pytest.mark.parametrize("cfg", [MAD, TWO_SIGMA])
def test_output_stays_within_samples(cfg):
    maps = noisy_maps(k=5, seed=3)
    maps[2] = maps[2] * 1.5
    stack = np.stack(maps)
    depth = aggregate_depths(maps, cfg).depth
    assert np.all(depth >= stack.min(axis=0) - 1e-12)
    assert np.all(depth <= stack.max(axis=0) + 1e-12)


def test_identical_maps_are_returned_unchanged():
    m = np.random.default_rng(1).uniform(20, 90, (8, 8))
    result = aggregate_depths([m, m, m], MAD)
    np.testing.assert_allclose(result.depth, m)
    assert result.n_outliers_excluded == 0


def test_mad_cutoff_boundary():
    # median 10, MAD 1: z = 0.6745 * dev, 30 has z = 13.5
    maps = [np.full((1, 1), v) for v in (9.0, 10.0, 11.0, 30.0, 10.0)]
    result = aggregate_depths(maps, MAD)
    assert result.kept[:, 0, 0].tolist() == [True, True, True, False, True]
    assert result.depth[0, 0] == pytest.approx(10.0)


def test_too_few_maps():
    with pytest.raises(AggregationError):
        aggregate_depths(noisy_maps(k=2), MAD)


def test_shape_mismatch():
    with pytest.raises(AggregationError):
        aggregate_depths([np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5))], MAD)


def test_zero_mad_keeps_only_the_median():
    maps = [np.full((2, 2), v) for v in (10.0, 10.0, 10.0, 10.0, 10.0, 30.0)]
    result = aggregate_depths(maps, MAD)
    assert result.kept[:, 0, 0].tolist() == [True] * 5 + [False]
    np.testing.assert_array_equal(result.depth, np.full((2, 2), 10.0))
    assert result.n_outliers_excluded == 4


@pytest.mark.parametrize("cfg", [MAD, TWO_SIGMA])
def test_map_order_does_not_matter(cfg):
    maps = noisy_maps(k=7, seed=4)
    maps[5] = maps[5] + 3.0
    order = [3, 6, 0, 5, 1, 4, 2]
    a = aggregate_depths(maps, cfg)
    b = aggregate_depths([maps[i] for i in order], cfg)
    np.testing.assert_allclose(a.depth, b.depth, rtol=0, atol=1e-12)
    assert a.n_outliers_excluded == b.n_outliers_excluded


def test_mad_with_realistic_spread():
    rng = np.random.default_rng(11)
    base = rng.uniform(30, 70, (16, 16))
    maps = [base + rng.normal(0, 0.2, base.shape) for _ in range(8)]
    clean = np.mean(maps[1:], axis=0)
    maps[0] = maps[0] + 10.0
    result = aggregate_depths(maps, MAD)
    assert not result.kept[0].any()
    err = result.depth - clean
    assert np.sqrt(np.mean(err ** 2)) < 0.1
    assert np.max(np.abs(err)) < 0.5
    # the plain mean is pulled 1.25 mm off
    assert np.min(np.abs(np.mean(maps, axis=0) - clean)) > 1.0
