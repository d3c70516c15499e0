"""
Minimal n-dimensional tensor with reverse-mode automatic differentiation.

Covers exactly the operations the depth network and its loss need:
elementwise arithmetic, reductions, 2-D convolution, max pooling, bilinear
upsampling, batch normalisation, activations, dropout and weighted channel
concatenation. Everything is float64 and runs on numpy.

Each operation is a `Function` subclass with a numpy `forward` and a
`backward` that maps the output gradient to one gradient per input.
`Function.apply` wires the result into the graph; `Tensor.backward` walks
the graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from periscope.errors import GradientError, ShapeError

DTYPE = np.float64

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
SIGMOID_CLIP = 1e-12


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so `grad` matches `shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    A float64 array with optional gradient tracking.

    `grad` is populated by `backward()` on every reachable tensor with
    `requires_grad=True`, intermediates included. Gradients accumulate
    across calls until `zero_grad()`.
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
    ):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator

    # ── Introspection ─────────────────────────────────────────

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ── Autograd ──────────────────────────────────────────────

    def backward(self) -> None:
        """Populate `.grad` on every tensor reachable from this scalar."""
        if self.data.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("backward() called on a tensor that does not require grad")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node.creator is None:
                continue
            input_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = Function.unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    # ── Operators ─────────────────────────────────────────────

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        return Mul.apply(self, as_tensor(1.0 / float(other)))

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, as_tensor(-1.0))

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Sum.apply(self) / float(self.size)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Post-order over the graph below `root` (inputs before outputs)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=False)


def parameter(data: Any) -> Tensor:
    return Tensor(data, requires_grad=True)


# ── Elementwise arithmetic ────────────────────────────────────


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class Sum(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class MaskMul(Function):
    """Multiply by a constant array that takes no gradient."""

    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


# ── Activations ───────────────────────────────────────────────


class ReLU(Function):
    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, 0.0)

    def backward(self, grad):
        return (grad * self.positive,)


class Sigmoid(Function):
    def forward(self, x):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        self.s = s
        return np.clip(s, SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)

    def backward(self, grad):
        return (grad * self.s * (1.0 - self.s),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= p
    return MaskMul.apply(x, mask=keep.astype(DTYPE) / (1.0 - p))


# ── Convolution ───────────────────────────────────────────────


class Conv2d(Function):
    def forward(self, x, w, b, stride: int, padding: int):
        n, _, h, wd = x.shape
        k, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        out = np.zeros((n, k, ho, wo), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
        out += b[None, :, None, None]
        self.xp, self.w = xp, w
        self.stride, self.padding = stride, padding
        self.in_hw, self.out_hw = (h, wd), (ho, wo)
        return out

    def backward(self, grad):
        xp, w, s, p = self.xp, self.w, self.stride, self.padding
        (h, wd), (ho, wo) = self.in_hw, self.out_hw
        _, _, kh, kw = w.shape
        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + s * (ho - 1) + 1, s)
                cols = slice(j, j + s * (wo - 1) + 1, s)
                gw[:, :, i, j] = np.tensordot(grad, xp[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, rows, cols] += np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, grad.sum(axis=(0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with a KxCx3x3 (or KxCx1x1) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and KCHW weight, got {x.shape} and {weight.shape}")
    kh, kw = weight.shape[2:]
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"conv2d supports 3x3 and 1x1 kernels, got {kh}x{kw}")
    if padding not in (0, 1) or stride not in (1, 2):
        raise ShapeError(f"conv2d needs padding in {{0,1}} and stride in {{1,2}}, got {padding}/{stride}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {weight.shape[0]} filters")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d input {x.shape[2:]} smaller than kernel {kh}x{kw}")
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


# ── Resampling ────────────────────────────────────────────────


class MaxPool2d(Function):
    def forward(self, x, size: int, stride: int):
        n, c, h, w = x.shape
        windows = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2:4]
        flat = windows.reshape(n, c, ho, wo, size * size)
        # argmax keeps the first occurrence in row-major order on ties
        idx = flat.argmax(axis=-1)
        self.in_shape, self.idx, self.size, self.stride = x.shape, idx, size, stride
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, _, _ = self.in_shape
        ho, wo = self.idx.shape[2:]
        di, dj = np.divmod(self.idx, self.size)
        rows = np.arange(ho)[None, None, :, None] * self.stride + di
        cols = np.arange(wo)[None, None, None, :] * self.stride + dj
        nn = np.broadcast_to(np.arange(n)[:, None, None, None], rows.shape)
        cc = np.broadcast_to(np.arange(c)[None, :, None, None], rows.shape)
        gx = np.zeros(self.in_shape, dtype=DTYPE)
        np.add.at(gx, (nn, cc, rows, cols), grad)
        return (gx,)


def maxpool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = size if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    if x.shape[2] < size or x.shape[3] < size:
        raise ShapeError(f"maxpool2d window {size} larger than spatial dims {x.shape[2:]}")
    return MaxPool2d.apply(x, size=size, stride=stride)


def interpolation_matrix(n_in: int, scale: int) -> np.ndarray:
    """Row o holds the half-pixel (align_corners=False) bilinear weights of output sample o."""
    n_out = n_in * scale
    src = (np.arange(n_out, dtype=DTYPE) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    matrix = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


class BilinearUpsample(Function):
    def forward(self, x, scale: int):
        self.ah = interpolation_matrix(x.shape[2], scale)
        self.aw = interpolation_matrix(x.shape[3], scale)
        return self.ah @ x @ self.aw.T

    def backward(self, grad):
        return (self.ah.T @ grad @ self.aw,)


def bilinear_upsample(x: Tensor, scale: int = 2) -> Tensor:
    if scale not in (2, 4):
        raise ShapeError(f"bilinear_upsample supports scale 2 or 4, got {scale}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW input, got {x.shape}")
    return BilinearUpsample.apply(x, scale=scale)


# ── Batch normalisation ───────────────────────────────────────


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (buffers, not parameters)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


class BatchNorm(Function):
    _AXES = (0, 2, 3)

    def forward(self, x, gamma, beta, state: BatchNormState, training: bool):
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=self._AXES)
            var = x.var(axis=self._AXES)
            state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
            unbiased = var * count / (count - 1)
            state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
        else:
            mean, var = state.running_mean, state.running_var
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.xhat, self.inv_std, self.gamma, self.training = xhat, inv_std, gamma, training
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def backward(self, grad):
        axes = self._AXES
        xhat = self.xhat
        g_gamma = (grad * xhat).sum(axis=axes)
        g_beta = grad.sum(axis=axes)
        g_xhat = grad * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if not self.training:
            return g_xhat * inv_std, g_gamma, g_beta
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        gx = inv_std / count * (
            count * g_xhat
            - g_xhat.sum(axis=axes, keepdims=True)
            - xhat * (g_xhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, g_gamma, g_beta


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm shape mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
    return BatchNorm.apply(x, gamma, beta, state=state, training=training)


# ── Channel concatenation ─────────────────────────────────────


class WeightedConcat(Function):
    def forward(self, *arrays, weights: Sequence[float]):
        self.weights = weights
        self.bounds = np.cumsum([0] + [a.shape[1] for a in arrays])
        return np.concatenate([w * a for a, w in zip(arrays, weights)], axis=1)

    def backward(self, grad):
        return tuple(
            w * grad[:, self.bounds[i]:self.bounds[i + 1]]
            for i, w in enumerate(self.weights)
        )


def weighted_concat(parts: Iterable[tuple[Tensor, float]]) -> Tensor:
    """Scale each part by its weight and concatenate along channels."""
    parts = list(parts)
    if not parts:
        raise ShapeError("weighted_concat needs at least one part")
    ref = parts[0][0].shape
    for tensor, weight in parts:
        if tensor.ndim != 4 or tensor.shape[0] != ref[0] or tensor.shape[2:] != ref[2:]:
            raise ShapeError(f"weighted_concat spatial mismatch: {tensor.shape} vs {ref}")
        if not np.isfinite(weight):
            raise ShapeError(f"weighted_concat weight must be finite, got {weight}")
    return WeightedConcat.apply(*(t for t, _ in parts), weights=[float(w) for _, w in parts])


class ChannelSlice(Function):
    def forward(self, x, start: int, stop: int):
        self.in_shape, self.start, self.stop = x.shape, start, stop
        return x[:, start:stop].copy()

    def backward(self, grad):
        gx = np.zeros(self.in_shape, dtype=DTYPE)
        gx[:, self.start:self.stop] = grad
        return (gx,)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to {x.shape[1]} channels")
    bounds = np.cumsum([0, *sizes])
    return [ChannelSlice.apply(x, start=int(a), stop=int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# ── Gradient checking ─────────────────────────────────────────


def numeric_grad(loss_fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5,
                 indices: Optional[Iterable[tuple[int, ...]]] = None) -> np.ndarray:
    """Central finite differences of a scalar `loss_fn()` w.r.t. entries of `tensor.data`."""
    grad = np.zeros_like(tensor.data)
    targets = list(indices) if indices is not None else list(np.ndindex(*tensor.shape))
    for idx in targets:
        orig = tensor.data[idx]
        tensor.data[idx] = orig + h
        up = loss_fn().item()
        tensor.data[idx] = orig - h
        down = loss_fn().item()
        tensor.data[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradient arrays."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
