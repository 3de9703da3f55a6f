"""Numeric primitives for the fully pointwise networks.

Tensors are plain ``numpy.ndarray`` objects in ``(n, c, h, w)`` layout with
``float32`` storage. Every forward primitive has a matching backward so the
networks can be trained without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent for an operation."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value would enter the parameters."""


def as_tensor(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) tensor, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# pointwise convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights ``(c_out, c_in, 1, 1)`` and bias ``(c_out,)`` of a 1x1 conv."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim == 2:
            self.weights = self.weights[:, :, None, None]
        if self.weights.ndim != 4 or self.weights.shape[2:] != (1, 1):
            raise ShapeError(f"pointwise kernel must be (c_out, c_in, 1, 1), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.weights.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.weights[:, :, 0, 0]

    def copy(self) -> "ConvParams":
        return ConvParams(self.weights.copy(), self.bias.copy())


def pointwise_conv_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != params.c_in:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{params.weights.shape} expects {params.c_in}"
        )
    n, c, h, w = x.shape
    out = np.matmul(params.matrix, x.reshape(n, c, h * w))
    out += params.bias[None, :, None]
    return out.reshape(n, params.c_out, h, w)


def pointwise_conv_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for a 1x1 conv."""
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    n, c, h, w = x.shape
    expected = (n, params.c_out, h, w)
    if x.shape[1] != params.c_in or grad_out.shape != expected:
        raise ShapeError(
            f"backward shapes inconsistent: input {x.shape}, kernel {params.weights.shape}, "
            f"grad_out {grad_out.shape} (expected {expected})"
        )
    g = grad_out.reshape(n, params.c_out, h * w)
    xf = x.reshape(n, c, h * w)
    grad_input = np.matmul(params.matrix.T, g).reshape(x.shape)
    grad_w = np.einsum("noq,niq->oi", g, xf, dtype=np.float64).astype(DTYPE)
    grad_b = g.sum(axis=(0, 2), dtype=np.float64).astype(DTYPE)
    return grad_input, grad_w[:, :, None, None], grad_b


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, grad_out, 0).astype(DTYPE)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


def pool_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"pooling kernel {kernel}, stride {stride}, pad {pad} does not tile an input of size {size}"
        )
    out = span // stride + 1
    # every window must see at least one real pixel, otherwise it would emit -inf
    if pad >= kernel or (out - 1) * stride - pad >= size:
        raise ShapeError(f"pooling window falls entirely inside the padding (size {size}, pad {pad})")
    return out


def pool_windows(h: int, w: int, kernel, stride: int, pad: int) -> np.ndarray:
    """Flat input indices covered by each pooling window, padding dropped.

    Returns an ``(cells, pixels)`` int32 array when every window holds the same
    number of real pixels; windows are listed row-major, pixels in scan order.
    """
    kh, kw = kernel
    oh = pool_output_size(h, kh, stride, pad)
    ow = pool_output_size(w, kw, stride, pad)
    rows = []
    for oy in range(oh):
        y0 = oy * stride - pad
        ys = range(max(y0, 0), min(y0 + kh, h))
        for ox in range(ow):
            x0 = ox * stride - pad
            xs = range(max(x0, 0), min(x0 + kw, w))
            rows.append([y * w + xx for y in ys for xx in xs])
    if len({len(r) for r in rows}) != 1:
        raise ShapeError("pooling windows hold unequal pixel counts; use maxpool_forward")
    return np.asarray(rows, dtype=np.int32)


@dataclass
class PoolIndex:
    """Winning flat ``h*w`` input index for every pooled output cell."""

    indices: np.ndarray
    input_shape: tuple


def maxpool_forward(x: np.ndarray, kernel, stride: int, pad: int):
    """Max pooling with ``-inf`` padding. Returns ``(output, PoolIndex)``."""
    x = as_tensor(x)
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    kh, kw = kernel
    n, c, h, w = x.shape
    oh = pool_output_size(h, kh, stride, pad)
    ow = pool_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow].reshape(n, c, oh, ow, kh * kw)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ly, lx = np.divmod(local, kw)
    iy = ly + (np.arange(oh) * stride - pad)[:, None]
    ix = lx + (np.arange(ow) * stride - pad)[None, :]
    return np.ascontiguousarray(out), PoolIndex((iy * w + ix).astype(np.int64), x.shape)


def maxpool_backward(index: PoolIndex, grad_out: np.ndarray) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != index.indices.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooling map {index.indices.shape}")
    n, c, h, w = index.input_shape
    offset = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    grad = np.bincount((index.indices + offset).ravel(), weights=grad_out.ravel().astype(np.float64),
                       minlength=n * c * h * w)
    return grad.reshape(n, c, h, w).astype(DTYPE)


# ---------------------------------------------------------------------------
# concat / resize
# ---------------------------------------------------------------------------


def concat_channels(inputs) -> np.ndarray:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"cannot concatenate {t.shape} with {ref}: (n, h, w) differ")
    return np.concatenate(inputs, axis=1)


def _resize_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float64)


def bilinear_resize(image: np.ndarray, target) -> np.ndarray:
    """Half-pixel aligned bilinear resize of ``(n, c, h, w)`` to ``target``."""
    image = as_tensor(image)
    th, tw = target
    if th < 1 or tw < 1:
        raise ShapeError(f"resize target must be positive, got {target}")
    h, w = image.shape[2:]
    if (h, w) == (th, tw):
        return image.copy()
    y0, y1, fy = _resize_weights(h, th)
    x0, x1, fx = _resize_weights(w, tw)
    img = image.astype(np.float64)
    rows = img[:, :, y0, :] * (1 - fy)[:, None] + img[:, :, y1, :] * fy[:, None]
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    return out.astype(DTYPE)


# ---------------------------------------------------------------------------
# initialization and optimization
# ---------------------------------------------------------------------------


def msra_init(fan_in: int, shape, rng: np.random.Generator) -> np.ndarray:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def lr_schedule(iteration: int, base_lr: float = 0.005, step: int = 10000, floor: float = 3.125e-4) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return max(base_lr * 2.0 ** -(iteration // step), floor)


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)
    iteration: int = 0


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float = 0.9,
             weight_decay: float = 5e-6) -> None:
    """In-place momentum SGD over a dict of named arrays.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key!r} at step {state.iteration}")
    for key, p in params.items():
        g = grads[key]
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {key!r} {p.shape}")
        v = state.buffers.get(key)
        if v is None:
            v = state.buffers[key] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    state.iteration += 1
