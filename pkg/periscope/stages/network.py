"""
Depth-weighted encoder-decoder network.

Five encoder levels and a bottleneck, each two [conv3x3 -> ReLU -> BN]
units, feed a five-level decoder. Only decoder levels 5 and 4 receive
skip concatenations, each source scaled by its configured weight; levels
3..1 see nothing but the upsampled output of the level below. E1 and E2
never reach the decoder directly.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterator, Optional

import numpy as np

from periscope.errors import ConfigError, ShapeError
from periscope.models.network import NetworkConfig
from periscope.tools.tensor_core import (
    BatchNormState,
    Tensor,
    batchnorm,
    bilinear_upsample,
    conv2d,
    dropout,
    maxpool2d,
    parameter,
    relu,
    sigmoid,
    weighted_concat,
)

logger = logging.getLogger(__name__)

REFERENCE_SCALE_PARAMS = 28_800_000
MIN_RESOLUTION = 64            # six halvings must leave at least one pixel

ENCODER = ("enc1", "enc2", "enc3", "enc4", "enc5")
DECODER = ("dec5", "dec4", "dec3", "dec2", "dec1")

# (level, source) -> tensor ; lets callers inspect or perturb a resampled skip source
SkipHook = Callable[[str, str, Tensor], Tensor]


# ── Layer table ───────────────────────────────────────────────


def _block_inputs(config: NetworkConfig) -> list[tuple[str, int, int]]:
    """(block name, input channels, output channels) in declaration order."""
    c = config.channels()
    b = config.base_channels
    return [
        ("enc1", 1, c[0]),
        ("enc2", c[0], c[1]),
        ("enc3", c[1], c[2]),
        ("enc4", c[2], c[3]),
        ("enc5", c[3], c[4]),
        ("bottleneck", c[4], c[5]),
        ("dec5", c[2] + c[3] + c[4] + c[5], 16 * b),
        ("dec4", c[2] + c[3] + c[5] + 16 * b, 8 * b),
        ("dec3", 8 * b, 4 * b),
        ("dec2", 4 * b, 2 * b),
        ("dec1", 2 * b, b),
    ]


def layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every trainable tensor as (name, shape), in checkpoint order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for name, cin, cout in _block_inputs(config):
        for unit, unit_in in ((1, cin), (2, cout)):
            shapes += [
                (f"{name}.conv{unit}.weight", (cout, unit_in, 3, 3)),
                (f"{name}.conv{unit}.bias", (cout,)),
                (f"{name}.bn{unit}.gamma", (cout,)),
                (f"{name}.bn{unit}.beta", (cout,)),
            ]
    b = config.base_channels
    shapes += [("head.weight", (1, b, 1, 1)), ("head.bias", (1,))]
    return shapes


def parameter_count(config: NetworkConfig) -> int:
    """Exact number of trainable scalars (batch-norm running stats excluded)."""
    return sum(int(np.prod(shape)) for _, shape in layer_shapes(config))


def search_base_channels(
    target: int = REFERENCE_SCALE_PARAMS,
    tolerance: float = 0.15,
    resolution: int = 256,
    max_base: int = 256,
) -> tuple[int, int]:
    """Base width whose parameter count lies closest to `target`."""
    best: Optional[tuple[int, int]] = None
    for base in range(1, max_base + 1):
        count = parameter_count(NetworkConfig(base_channels=base, input_resolution=resolution))
        if best is None or abs(count - target) < abs(best[1] - target):
            best = (base, count)
        if count > target:
            break
    assert best is not None
    base, count = best
    if abs(count - target) > tolerance * target:
        raise ConfigError(f"no base width within {tolerance:.0%} of {target} parameters (closest {count})")
    logger.info("Parameter search: base_channels=%d -> %d parameters (target %d)", base, count, target)
    return base, count


# ── Model ─────────────────────────────────────────────────────


class DepthNet:
    """Parameters, batch-norm buffers and the forward pass of one network."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor], bn_states: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.skip_hook: Optional[SkipHook] = None

    @classmethod
    def build(cls, config: NetworkConfig, seed: int = 0) -> "DepthNet":
        """He-normal conv weights, zero biases, unit gamma, zero beta; one generator in declaration order."""
        if config.input_resolution < MIN_RESOLUTION:
            raise ConfigError(
                f"input_resolution {config.input_resolution} too small for six halvings (need >= {MIN_RESOLUTION})"
            )
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in layer_shapes(config):
            if name.endswith(".weight"):
                fan_in = shape[1] * shape[2] * shape[3]
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = parameter(data)
        bn_states = {
            name[: -len(".gamma")]: BatchNormState.fresh(shape[0])
            for name, shape in layer_shapes(config)
            if name.endswith(".gamma")
        }
        logger.info(
            "Built network: base_channels=%d, resolution=%d, %d parameters",
            config.base_channels, config.input_resolution, parameter_count(config),
        )
        return cls(config, params, bn_states)

    # ── Parameters ────────────────────────────────────────────

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Deep copy of parameters and running statistics."""
        snapshot = {name: p.data.copy() for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            snapshot[f"{name}.running_mean"] = st.running_mean.copy()
            snapshot[f"{name}.running_var"] = st.running_var.copy()
        return snapshot

    def load_state(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(snapshot[name], dtype=np.float64)
        for name, st in self.bn_states.items():
            st.running_mean = np.array(snapshot[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(snapshot[f"{name}.running_var"], dtype=np.float64)

    @staticmethod
    def concat_edges() -> dict[str, list[str]]:
        """Which activations each skip-receiving decoder level concatenates, in order."""
        return {
            "dec5": ["enc3", "enc4", "enc5", "bottleneck"],
            "dec4": ["enc3", "enc4", "bottleneck", "dec5"],
        }

    # ── Forward ───────────────────────────────────────────────

    def _block(self, name: str, x: Tensor, training: bool) -> Tensor:
        p = self.params
        for unit in (1, 2):
            x = conv2d(x, p[f"{name}.conv{unit}.weight"], p[f"{name}.conv{unit}.bias"], stride=1, padding=1)
            x = relu(x)
            x = batchnorm(
                x, p[f"{name}.bn{unit}.gamma"], p[f"{name}.bn{unit}.beta"],
                self.bn_states[f"{name}.bn{unit}"], training,
            )
        return x

    def _skip(self, level: str, source: str, x: Tensor) -> Tensor:
        return self.skip_hook(level, source, x) if self.skip_hook is not None else x

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Map a normalised N x 1 x R x R red-channel batch to normalised depth in (0, 1)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"network expects N x 1 x R x R input, got {x.shape}")
        h, w = x.shape[2:]
        if h % 32 or w % 32 or min(h, w) < MIN_RESOLUTION:
            raise ShapeError(f"spatial size {h}x{w} must be a multiple of 32 and at least {MIN_RESOLUTION}")
        if training and rng is None:
            rng = np.random.default_rng(0)
        p_drop = self.config.dropout_p

        e1 = self._block("enc1", x, training)
        e2 = self._block("enc2", maxpool2d(e1), training)
        e3 = self._block("enc3", maxpool2d(e2), training)
        e4 = self._block("enc4", maxpool2d(e3), training)
        e5 = dropout(self._block("enc5", maxpool2d(e4), training), p_drop, training, rng)
        bn = dropout(self._block("bottleneck", maxpool2d(e5), training), p_drop, training, rng)

        sw = self.config.skip_weights
        d5 = self._block("dec5", weighted_concat([
            (self._skip("dec5", "enc3", maxpool2d(e3, 4)), sw.d5.e3),
            (self._skip("dec5", "enc4", maxpool2d(e4, 2)), sw.d5.e4),
            (self._skip("dec5", "enc5", e5), sw.d5.e5),
            (self._skip("dec5", "bottleneck", bilinear_upsample(bn, 2)), sw.d5.bn),
        ]), training)
        d4 = self._block("dec4", weighted_concat([
            (self._skip("dec4", "enc3", maxpool2d(e3, 2)), sw.d4.e3),
            (self._skip("dec4", "enc4", e4), sw.d4.e4),
            (self._skip("dec4", "bottleneck", bilinear_upsample(bn, 4)), sw.d4.bn),
            (self._skip("dec4", "dec5", bilinear_upsample(d5, 2)), sw.d4.d5),
        ]), training)
        d3 = self._block("dec3", bilinear_upsample(d4, 2), training)
        d2 = self._block("dec2", bilinear_upsample(d3, 2), training)
        d1 = self._block("dec1", bilinear_upsample(d2, 2), training)
        return sigmoid(conv2d(d1, self.params["head.weight"], self.params["head.bias"], stride=1, padding=0))

    def predict(self, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
        """Eval-mode forward over N x R x R arrays in [0, 1]; returns normalised depth."""
        out = []
        for start in range(0, len(images), batch_size):
            batch = Tensor(images[start:start + batch_size, None, :, :])
            out.append(self.forward(batch, training=False).data[:, 0])
        return np.concatenate(out, axis=0)
