import numpy as np
import pytest

from periscope.errors import CheckpointError, ConfigError, ShapeError
from periscope.models.network import D4Skips, D5Skips, NetworkConfig, SkipWeights
from periscope.stages.network import DepthNet, layer_shapes, parameter_count, search_base_channels
from periscope.tools.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from periscope.tools.tensor_core import Tensor, numeric_grad, relative_error


def tiny(base=2, resolution=64, **kw):
    return NetworkConfig(base_channels=base, input_resolution=resolution, **kw)


def batch(n=1, resolution=64, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 1, resolution, resolution)))


# ── build ─────────────────────────────────────────────────────


def test_build_is_deterministic():
    a = DepthNet.build(tiny(), seed=3).state()
    b = DepthNet.build(tiny(), seed=3).state()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_build_seed_changes_weights():
    a = DepthNet.build(tiny(), seed=1).params["enc1.conv1.weight"].data
    b = DepthNet.build(tiny(), seed=2).params["enc1.conv1.weight"].data
    assert not np.array_equal(a, b)


def test_biases_zero_and_bn_identity():
    model = DepthNet.build(tiny(), seed=0)
    for name, p in model.named_parameters():
        if name.endswith((".bias", ".beta")):
            assert np.all(p.data == 0.0), name
        if name.endswith(".gamma"):
            assert np.all(p.data == 1.0), name


def test_he_init_std():
    model = DepthNet.build(tiny(base=8), seed=0)
    w = model.params["dec5.conv1.weight"].data
    assert w.size >= 10_000
    expected = np.sqrt(2.0 / (w.shape[1] * 9))
    assert abs(w.std() - expected) / expected < 0.10


def test_config_rejects_resolution_below_six_halvings():
    with pytest.raises(ValueError):
        NetworkConfig(input_resolution=32)
    assert NetworkConfig(input_resolution=64).input_resolution == 64


def test_build_rejects_small_resolution():
    with pytest.raises(ConfigError):
        DepthNet.build(NetworkConfig.model_construct(base_channels=2, input_resolution=32))


def test_config_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        NetworkConfig(input_resolution=96)


def test_default_skip_weights():
    sw = NetworkConfig().skip_weights
    assert (sw.d5.e3, sw.d5.e4, sw.d5.e5, sw.d5.bn) == (0.1, 0.8, 1.0, 1.0)
    assert (sw.d4.e3, sw.d4.e4, sw.d4.bn, sw.d4.d5) == (0.2, 0.5, 0.8, 1.0)


# ── forward ───────────────────────────────────────────────────


@pytest.mark.parametrize("resolution", [64, 128])
def test_forward_shape(resolution):
    model = DepthNet.build(tiny(base=1, resolution=resolution), seed=0)
    out = model.forward(batch(2, resolution), training=False)
    assert out.shape == (2, 1, resolution, resolution)


def test_forward_output_in_open_interval():
    model = DepthNet.build(tiny(), seed=0)
    x = Tensor(np.random.default_rng(1).normal(0, 100, (1, 1, 64, 64)))
    out = model.forward(x, training=False).data
    assert np.all(out > 0) and np.all(out < 1)


def test_eval_forward_is_deterministic():
    model = DepthNet.build(tiny(), seed=0)
    x = batch(2)
    np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)


def test_training_forward_is_seeded():
    x = batch(2)
    a = DepthNet.build(tiny(), seed=0).forward(x, training=True, rng=np.random.default_rng(4)).data
    b = DepthNet.build(tiny(), seed=0).forward(x, training=True, rng=np.random.default_rng(4)).data
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_multichannel_input():
    model = DepthNet.build(tiny(), seed=0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 3, 64, 64))))


def test_predict_matches_forward():
    model = DepthNet.build(tiny(), seed=0)
    images = np.random.default_rng(2).uniform(0, 1, (3, 64, 64))
    pred = model.predict(images, batch_size=2)
    assert pred.shape == (3, 64, 64)
    np.testing.assert_allclose(pred[2], model.forward(Tensor(images[2:3, None])).data[0, 0])


def test_shallow_levels_never_concatenated():
    edges = DepthNet.concat_edges()
    assert set(edges) == {"dec5", "dec4"}
    for sources in edges.values():
        assert "enc1" not in sources and "enc2" not in sources


def test_skip_hook_sees_declared_edges():
    model = DepthNet.build(tiny(), seed=0)
    seen = []

    def hook(level, source, tensor):
        seen.append((level, source))
        return tensor

    model.skip_hook = hook
    model.forward(batch())
    expected = [(level, src) for level, sources in DepthNet.concat_edges().items() for src in sources]
    assert seen == expected


def test_zero_skip_weight_blocks_perturbations():
    weights = SkipWeights(d5=D5Skips(e3=0.0), d4=D4Skips(e3=0.0))
    model = DepthNet.build(tiny(skip_weights=weights), seed=0)
    x = batch()
    clean = model.forward(x).data
    rng = np.random.default_rng(9)

    def perturb(level, source, tensor):
        if source == "enc3":
            return Tensor(tensor.data + rng.normal(0, 50, tensor.shape))
        return tensor

    model.skip_hook = perturb
    np.testing.assert_array_equal(model.forward(x).data, clean)


def test_nonzero_skip_weight_passes_perturbations():
    model = DepthNet.build(tiny(), seed=0)
    x = batch()
    clean = model.forward(x).data
    model.skip_hook = lambda level, source, t: Tensor(t.data + 10.0) if source == "enc3" else t
    assert not np.array_equal(model.forward(x).data, clean)


def test_end_to_end_gradient_spot_check():
    model = DepthNet.build(tiny(base=2), seed=0)
    x = batch(1, seed=5)
    target = np.random.default_rng(6).uniform(0, 1, (1, 1, 64, 64))

    def loss_fn():
        out = model.forward(x, training=True, rng=np.random.default_rng(7))
        return ((out - target) ** 2).mean()

    model.zero_grad()
    loss_fn().backward()

    rng = np.random.default_rng(8)
    names = [name for name, _ in model.named_parameters()]
    analytic, numeric = [], []
    for _ in range(20):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic.append(p.grad[idx])
        # early-layer weights move every pixel; a wide step lets some cross relu or pooling kinks
        numeric.append(numeric_grad(loss_fn, p, h=1e-7, indices=[idx])[idx])
    assert relative_error(np.array(analytic), np.array(numeric)) < 1e-3


# ── parameter count ───────────────────────────────────────────


def hand_count(b: int) -> int:
    blocks = [
        (1, b), (b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b), (8 * b, 16 * b), (16 * b, 32 * b),
        (4 * b + 8 * b + 16 * b + 32 * b, 16 * b),
        (4 * b + 8 * b + 32 * b + 16 * b, 8 * b),
        (8 * b, 4 * b), (4 * b, 2 * b), (2 * b, b),
    ]
    total = 0
    for cin, cout in blocks:
        total += cout * cin * 9 + cout        # conv1
        total += cout * cout * 9 + cout       # conv2
        total += 4 * cout                     # two batch norms, gamma + beta
    return total + b + 1                      # 1x1 head


def test_parameter_count_toy_config():
    assert parameter_count(tiny(base=1)) == hand_count(1) == 35405


@pytest.mark.parametrize("base", [2, 3, 8, 29])
def test_parameter_count_closed_form(base):
    count = parameter_count(tiny(base=base))
    assert count == hand_count(base) == 34830 * base ** 2 + 574 * base + 1


def test_parameter_count_monotone():
    counts = [parameter_count(tiny(base=b)) for b in range(1, 12)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_layer_shapes_cover_count():
    shapes = layer_shapes(tiny(base=4))
    assert sum(int(np.prod(s)) for _, s in shapes) == parameter_count(tiny(base=4))
    assert shapes[-2:] == [("head.weight", (1, 4, 1, 1)), ("head.bias", (1,))]


def test_search_hits_reference_scale():
    base, count = search_base_channels()
    assert base == 29
    assert count == 29_308_677
    assert 24_480_000 <= count <= 33_120_000


def test_search_rejects_unreachable_tolerance():
    with pytest.raises(ConfigError):
        search_base_channels(target=36_000, tolerance=0.001)


# ── checkpoint ────────────────────────────────────────────────


def test_checkpoint_round_trip(tmp_path):
    model = DepthNet.build(tiny(), seed=4)
    x = batch(2)
    model.forward(x, training=True, rng=np.random.default_rng(0))     # move running stats off defaults
    expected = model.forward(x).data

    path = tmp_path / "model.pdem"
    save_checkpoint(path, model, training={"epochs": 1})
    loaded, header = load_checkpoint(path)
    assert header.training == {"epochs": 1}
    assert header.network == model.config
    assert np.max(np.abs(loaded.forward(x).data - expected)) < 1e-5


def test_checkpoint_prefix():
    raw = encode_checkpoint(DepthNet.build(tiny(base=1), seed=0))
    assert raw[:4] == b"PDEM"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_rejects_bad_magic():
    raw = encode_checkpoint(DepthNet.build(tiny(base=1), seed=0))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + raw[4:])


def test_checkpoint_rejects_truncated_blob():
    raw = encode_checkpoint(DepthNet.build(tiny(base=1), seed=0))
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:-8])


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pdem")
