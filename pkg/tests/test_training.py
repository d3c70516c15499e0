import json

import numpy as np
import pytest

from periscope.errors import DatasetError, GradientError, ShapeError
from periscope.models.network import NetworkConfig
from periscope.models.training import TrainConfig
from periscope.stages.network import DepthNet
from periscope.stages.training import (
    DepthDataset,
    OptimizerState,
    berhu_loss,
    denormalize_depth,
    evaluate,
    normalize_depth,
    optimizer_step,
    split_counts,
    split_indices,
    train,
)
from periscope.tools.tensor_core import Tensor, numeric_grad, parameter, relative_error


# ── BerHu ─────────────────────────────────────────────────────


def test_berhu_zero_when_equal():
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 4, 4)))
    assert berhu_loss(x, x).item() == 0.0


def test_berhu_pinned_threshold():
    assert berhu_loss(Tensor([1.0]), Tensor([0.0]), c=0.5).item() == pytest.approx(1.25)


def test_berhu_continuous_at_threshold():
    c = 0.7
    inside = berhu_loss(Tensor([c]), Tensor([0.0]), c=c).item()
    outside = berhu_loss(Tensor([c + 1e-13]), Tensor([0.0]), c=c).item()
    assert inside == pytest.approx(c, abs=1e-12)
    assert outside == pytest.approx(c, abs=1e-12)


def test_berhu_threshold_from_max_error():
    pred, target = Tensor([0.0, 0.1, 2.0]), Tensor([0.0, 0.0, 0.0])
    # c = 0.24 * 2.0 = 0.48: 0 and 0.1 are L1, 2.0 is quadratic
    expected = (0.0 + 0.1 + (4.0 + 0.48 ** 2) / 0.96) / 3
    assert berhu_loss(pred, target).item() == pytest.approx(expected)


def test_berhu_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert berhu_loss(Tensor(rng.normal(size=10)), Tensor(rng.normal(size=10))).item() > 0


def test_berhu_gradient_with_pinned_threshold():
    rng = np.random.default_rng(2)
    pred = parameter(rng.normal(size=(2, 1, 4, 4)))
    target = Tensor(rng.normal(size=(2, 1, 4, 4)))
    c = 0.6
    pred.data[np.abs(np.abs(pred.data - target.data) - c) < 1e-3] += 0.01   # stay off the kink
    berhu_loss(pred, target, c=c).backward()
    numeric = numeric_grad(lambda: berhu_loss(pred, target, c=c), pred)
    assert relative_error(pred.grad, numeric) < 1e-4


def test_berhu_one_sided_slopes_at_kink():
    c, h = 0.5, 1e-7
    loss = lambda v: berhu_loss(Tensor([v]), Tensor([0.0]), c=c).item()
    assert (loss(c) - loss(c - h)) / h == pytest.approx(1.0, abs=1e-5)
    assert (loss(c + h) - loss(c)) / h == pytest.approx(1.0, abs=1e-5)


def test_berhu_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        berhu_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ── optimizer ─────────────────────────────────────────────────


@pytest.mark.parametrize("mode", ["adam", "sgd"])
def test_zero_gradient_leaves_params(mode):
    p = parameter([1.0, 2.0])
    optimizer_step([p], [np.zeros(2)], OptimizerState(mode=mode), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_sgd_step():
    p = parameter([1.0])
    optimizer_step([p], [np.ones(1)], OptimizerState(mode="sgd"), lr=0.1)
    assert p.data[0] == pytest.approx(0.9)


def bowl(mode: str, lr: float, steps: int) -> float:
    w = parameter([0.0])
    state = OptimizerState(mode=mode)
    for _ in range(steps):
        w.zero_grad()
        ((w - 3.0) ** 2).sum().backward()
        optimizer_step([w], [w.grad], state, lr)
    return w.data[0]


def test_sgd_converges_on_bowl():
    assert abs(bowl("sgd", 0.1, 1000) - 3.0) < 1e-3


def test_adam_converges_on_bowl():
    assert abs(bowl("adam", 0.05, 2000) - 3.0) < 1e-2


def test_optimizer_rejects_nan():
    p = parameter([1.0])
    with pytest.raises(GradientError):
        optimizer_step([p], [np.array([np.nan])], OptimizerState(), lr=0.1)
    assert p.data[0] == 1.0


def test_optimizer_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        optimizer_step([parameter([1.0])], [np.zeros(2)], OptimizerState(), lr=0.1)


# ── splits ────────────────────────────────────────────────────


@pytest.mark.parametrize("n,expected", [(10, (7, 1, 2)), (200, (140, 30, 30)), (8, (5, 1, 2)), (20, (14, 3, 3))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def test_split_indices_partition():
    parts = split_indices(50, seed=4)
    together = sorted(parts["train"] + parts["val"] + parts["test"])
    assert together == list(range(50))
    assert split_indices(50, seed=4) == parts
    assert split_indices(50, seed=5) != parts


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(split=(0.5, 0.3, 0.3))
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=10)


# ── depth normalisation ───────────────────────────────────────


def test_depth_normalisation():
    np.testing.assert_allclose(normalize_depth(np.array([20.0, 55.0, 90.0, 100.0])), [0.0, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(denormalize_depth(np.array([0.0, 0.5, 1.0])), [20.0, 55.0, 90.0])


# ── training loop ─────────────────────────────────────────────


def toy_dataset(n=6, resolution=64, seed=0) -> DepthDataset:
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n, resolution, resolution))
    depths = 0.3 + 0.4 * images
    return DepthDataset(
        images=images,
        depths=depths,
        ids=[f"{i:05d}" for i in range(n)],
        partitions={"train": list(range(n - 2)), "val": [n - 2], "test": [n - 1]},
    )


def toy_model(seed=0) -> DepthNet:
    return DepthNet.build(NetworkConfig(base_channels=1, input_resolution=64), seed=seed)


def test_patience_zero_runs_all_epochs():
    history, summary = train(toy_model(), toy_dataset(), TrainConfig(max_epochs=3, patience=0, batch_size=2))
    assert [r.epoch for r in history] == [1, 2, 3]
    assert summary.stop_reason == "max_epochs"
    assert not summary.stopped_early
    assert (summary.n_train, summary.n_val, summary.n_test) == (4, 1, 1)


def test_training_is_reproducible():
    config = TrainConfig(max_epochs=2, patience=0, batch_size=2, seed=3)
    first, _ = train(toy_model(), toy_dataset(), config)
    second, _ = train(toy_model(), toy_dataset(), config)
    assert [r.model_dump() for r in first] == [r.model_dump() for r in second]


def test_training_restores_best_weights():
    model = toy_model()
    history, summary = train(model, toy_dataset(), TrainConfig(max_epochs=3, patience=0, batch_size=2, lr=1e-3))
    best = min(history, key=lambda r: r.val_loss)
    assert summary.best_epoch == best.epoch
    assert summary.best_val_loss == best.val_loss


def test_training_writes_history(tmp_path):
    path = tmp_path / "out" / "history.jsonl"
    train(toy_model(), toy_dataset(), TrainConfig(max_epochs=2, patience=0, batch_size=4), history_path=path)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert set(records[0]) == {"epoch", "train_loss", "val_loss", "lr"}


def test_target_loss_stops_training():
    _, summary = train(toy_model(), toy_dataset(), TrainConfig(max_epochs=5, patience=0, target_train_loss=10.0))
    assert summary.epochs_run == 1
    assert summary.stop_reason == "target_loss"


def test_training_rejects_empty_validation():
    data = toy_dataset()
    data.partitions["val"] = []
    with pytest.raises(DatasetError):
        train(toy_model(), data, TrainConfig(max_epochs=2, patience=0))


# ── evaluation ────────────────────────────────────────────────


def test_evaluate_perfect():
    gt = np.random.default_rng(0).uniform(20, 90, (2, 8, 8))
    report = evaluate(gt, gt)
    assert report.abs_rel == report.sq_rel == report.rmse == report.rmse_log == 0.0
    assert report.delta1 == report.delta2 == report.delta3 == 1.0


def test_evaluate_uniform_overshoot():
    gt = np.random.default_rng(1).uniform(20, 90, (8, 8))
    report = evaluate(1.3 * gt, gt)
    assert (report.delta1, report.delta2, report.delta3) == (0.0, 1.0, 1.0)


def test_evaluate_abs_rel():
    gt = np.random.default_rng(2).uniform(20, 90, (8, 8))
    assert evaluate(1.1 * gt, gt).abs_rel == pytest.approx(0.1)


def test_evaluate_delta_is_scale_invariant():
    rng = np.random.default_rng(3)
    gt = rng.uniform(20, 90, (16, 16))
    pred = gt * rng.uniform(0.7, 1.5, gt.shape)
    a, b = evaluate(pred, gt), evaluate(7.5 * pred, 7.5 * gt)
    assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)
    assert a.delta1 <= a.delta2 <= a.delta3


def test_evaluate_excludes_nonpositive_gt():
    gt = np.full((4, 4), 50.0)
    gt[0, :2] = 0.0
    gt[1, 0] = -3.0
    report = evaluate(gt.copy(), gt)
    assert report.n_excluded == 3
    assert report.n_pixels == 13
    assert report.abs_rel == 0.0


def test_evaluate_rejects_all_invalid():
    with pytest.raises(ShapeError):
        evaluate(np.ones((2, 2)), np.zeros((2, 2)))
