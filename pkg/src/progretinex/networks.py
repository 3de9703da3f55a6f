"""IM-Net / NM-Net definitions, graph execution and the SGD training loop.

Both networks are small DAGs of pointwise convs, ReLUs and max pools that end
in a single scalar per patch. Execution has two routes: a reference route that
materializes every intermediate tensor with the primitives in
:mod:`progretinex.tensor`, and a fused route that evaluates each
conv -> ReLU -> pool chain with the kernels in :mod:`progretinex._kernels`.
"""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensor import (
    DTYPE,
    ConvParams,
    NumericError,
    OptimizerState,
    ShapeError,
    bilinear_resize,
    concat_channels,
    lr_schedule,
    maxpool_backward,
    maxpool_forward,
    msra_init,
    pointwise_conv_backward,
    pointwise_conv_forward,
    pool_output_size,
    pool_windows,
    relu_backward,
    relu_forward,
    sgd_step,
)

log = logging.getLogger(__name__)

IM_NET = 0
NM_NET = 1
PATCH_SIZE = 32


class ConfigError(KeyError):
    """Parameters do not match the network they are used with."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or failed a sanity check."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | relu | maxpool | concat | downsample
    inputs: tuple
    c_in: int = 0
    c_out: int = 0
    kernel: tuple = (0, 0)
    stride: int = 1
    pad: int = 0
    factor: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    net_id: int
    input_channels: int
    layers: tuple
    output: str
    input_size: int = PATCH_SIZE

    @property
    def conv_layers(self) -> list:
        return [layer for layer in self.layers if layer.kind == "conv"]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def consumers(self, name: str) -> list:
        return [layer for layer in self.layers if name in layer.inputs]

    def infer_shapes(self) -> dict:
        """Map every node name (including ``"data"``) to its ``(c, h, w)``."""
        s = self.input_size
        shapes = {"data": (self.input_channels, s, s)}
        for layer in self.layers:
            ins = [shapes[i] for i in layer.inputs]
            c, h, w = ins[0]
            if layer.kind == "conv":
                if c != layer.c_in:
                    raise ShapeError(f"{layer.name}: expects {layer.c_in} channels, gets {c}")
                shapes[layer.name] = (layer.c_out, h, w)
            elif layer.kind == "relu":
                shapes[layer.name] = (c, h, w)
            elif layer.kind == "maxpool":
                kh, kw = layer.kernel
                shapes[layer.name] = (
                    c,
                    pool_output_size(h, kh, layer.stride, layer.pad),
                    pool_output_size(w, kw, layer.stride, layer.pad),
                )
            elif layer.kind == "downsample":
                shapes[layer.name] = (c, h // layer.factor, w // layer.factor)
            elif layer.kind == "concat":
                if len({sh[1:] for sh in ins}) != 1:
                    raise ShapeError(f"{layer.name}: spatial sizes differ {ins}")
                shapes[layer.name] = (sum(sh[0] for sh in ins), h, w)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return shapes


def _unit(tag: str, src: str, c_in: int, c_out: int, kernel: int, stride: int, pad: int) -> list:
    return [
        LayerSpec(f"Conv-{tag}", "conv", (src,), c_in=c_in, c_out=c_out),
        LayerSpec(f"ReLU-{tag}", "relu", (f"Conv-{tag}",)),
        LayerSpec(f"MaxPool-{tag}", "maxpool", (f"ReLU-{tag}",), kernel=(kernel, kernel), stride=stride, pad=pad),
    ]


def build_im_net(input_channels: int = 4) -> NetworkSpec:
    """Two-scale illumination network: four parallel conv/pool units, then fusion."""
    if input_channels not in (3, 4):
        raise ValueError("input_channels must be 3 or 4")
    c = input_channels
    layers = [
        *_unit("BP1", "data", c, 160, 16, 16, 0),
        *_unit("BP2", "data", c, 160, 20, 16, 2),
        LayerSpec("Downsample", "downsample", ("data",), factor=2),
        *_unit("BP3", "Downsample", c, 160, 8, 8, 0),
        *_unit("BP4", "Downsample", c, 160, 10, 8, 1),
        LayerSpec("Concat", "concat", ("MaxPool-BP1", "MaxPool-BP2", "MaxPool-BP3", "MaxPool-BP4")),
        *_unit("DR1", "Concat", 640, 80, 2, 2, 0),
        LayerSpec("Conv6", "conv", ("MaxPool-DR1",), c_in=80, c_out=1),
    ]
    return NetworkSpec("IM-Net", IM_NET, c, tuple(layers), "Conv6")


def build_nm_net(input_channels: int = 4) -> NetworkSpec:
    """Single-chain noise-level network."""
    if input_channels not in (3, 4):
        raise ValueError("input_channels must be 3 or 4")
    layers = [
        *_unit("NP1", "data", input_channels, 160, 4, 4, 0),
        *_unit("NP2", "MaxPool-NP1", 160, 160, 4, 4, 0),
        *_unit("DR2", "MaxPool-NP2", 160, 80, 2, 2, 0),
        LayerSpec("Conv10", "conv", ("MaxPool-DR2",), c_in=80, c_out=1),
    ]
    return NetworkSpec("NM-Net", NM_NET, input_channels, tuple(layers), "Conv10")


def build_network(net_id: int, input_channels: int = 4) -> NetworkSpec:
    return (build_im_net if net_id == IM_NET else build_nm_net)(input_channels)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(net: NetworkSpec, rng: np.random.Generator) -> dict:
    """MSRA-initialized weights and zero biases for every conv layer."""
    params = {}
    for layer in net.conv_layers:
        w = msra_init(layer.c_in, (layer.c_out, layer.c_in, 1, 1), rng)
        params[layer.name] = ConvParams(w, np.zeros(layer.c_out, DTYPE))
    return params


def validate_params(net: NetworkSpec, params: dict) -> None:
    expected = {layer.name: layer for layer in net.conv_layers}
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"{net.name} parameter names mismatch: missing {missing}, unexpected {extra}")
    for name, layer in expected.items():
        p = params[name]
        if (p.c_out, p.c_in) != (layer.c_out, layer.c_in):
            raise ConfigError(f"{name}: params are {p.c_out}x{p.c_in}, network wants {layer.c_out}x{layer.c_in}")


def param_count(params: dict) -> int:
    return sum(p.weights.size + p.bias.size for p in params.values())


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def _flat(params: dict) -> dict:
    out = {}
    for name, p in params.items():
        out[f"{name}.weight"] = p.weights
        out[f"{name}.bias"] = p.bias
    return out


def _flat_grads(grads: dict) -> dict:
    out = {}
    for name, (gw, gb) in grads.items():
        out[f"{name}.weight"] = gw
        out[f"{name}.bias"] = gb
    return out


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class Cache:
    values: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)
    fused: bool = True


@functools.lru_cache(maxsize=None)
def _windows(h, w, kernel, stride, pad):
    return pool_windows(h, w, kernel, stride, pad)


@functools.lru_cache(maxsize=None)
def _fusion_plan(net: NetworkSpec) -> dict:
    """Map pool-layer name -> conv layer for every conv -> ReLU -> pool chain."""
    plan = {}
    for conv in net.conv_layers:
        users = net.consumers(conv.name)
        if len(users) != 1 or users[0].kind != "relu":
            continue
        relu_users = net.consumers(users[0].name)
        if len(relu_users) != 1 or relu_users[0].kind != "maxpool":
            continue
        plan[relu_users[0].name] = conv
    return plan


def _to_pixel_major(x):
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.reshape(n, c, h * w).transpose(0, 2, 1))


def forward(net: NetworkSpec, params: dict, x: np.ndarray, fused: bool = True):
    """Evaluate the network on ``x`` of shape ``(n, c, 32, 32)``.

    Returns ``(predictions (n,), cache)``.
    """
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4 or x.shape[1:] != (net.input_channels, net.input_size, net.input_size):
        raise ShapeError(f"{net.name} expects (n, {net.input_channels}, {net.input_size}, {net.input_size}), got {x.shape}")
    missing = [layer.name for layer in net.conv_layers if layer.name not in params]
    if missing:
        raise ConfigError(f"{net.name}: missing parameters for {missing}")
    cache = Cache(fused=fused)
    vals = cache.values
    vals["data"] = x
    plan = _fusion_plan(net) if fused else {}
    skip = set()
    for conv in plan.values():
        skip.add(conv.name)
        skip.add(net.consumers(conv.name)[0].name)
    for layer in net.layers:
        if layer.name in skip:
            continue
        ins = [] if layer.name in plan else [vals[i] for i in layer.inputs]
        if layer.name in plan:
            conv = plan[layer.name]
            p = params[conv.name]
            src = vals[conv.inputs[0]]
            n, c, h, w = src.shape
            win = _windows(h, w, layer.kernel, layer.stride, layer.pad)
            pm = _to_pixel_major(src)
            z = np.empty((n, p.c_out, win.shape[0]), DTYPE)
            arg = np.empty((n, p.c_out, win.shape[0]), np.int32)
            wt = np.ascontiguousarray(p.matrix.T)
            _kernels.conv_pool_forward(pm, wt, p.bias, win, z, arg)
            oh = pool_output_size(h, layer.kernel[0], layer.stride, layer.pad)
            ow = pool_output_size(w, layer.kernel[1], layer.stride, layer.pad)
            vals[layer.name] = np.maximum(z, 0).reshape(n, p.c_out, oh, ow)
            cache.aux[layer.name] = (pm, z, arg, win, src.shape)
        elif layer.kind == "conv":
            vals[layer.name] = pointwise_conv_forward(ins[0], params[layer.name])
        elif layer.kind == "relu":
            vals[layer.name] = relu_forward(ins[0])
        elif layer.kind == "maxpool":
            out, idx = maxpool_forward(ins[0], layer.kernel, layer.stride, layer.pad)
            vals[layer.name] = out
            cache.aux[layer.name] = idx
        elif layer.kind == "downsample":
            h, w = ins[0].shape[2:]
            vals[layer.name] = bilinear_resize(ins[0], (h // layer.factor, w // layer.factor))
        elif layer.kind == "concat":
            vals[layer.name] = concat_channels(ins)
    out = vals[net.output]
    return out.reshape(out.shape[0]), cache


def _needs_grad(net: NetworkSpec) -> dict:
    need = {"data": False}
    for layer in net.layers:
        need[layer.name] = layer.kind == "conv" or any(need[i] for i in layer.inputs)
    return need


def backward(net: NetworkSpec, params: dict, cache: Cache, grad_pred: np.ndarray) -> dict:
    """Gradients ``{conv name: (grad_weights, grad_bias)}`` of a scalar loss."""
    vals = cache.values
    n = vals["data"].shape[0]
    need = _needs_grad(net)
    plan = _fusion_plan(net) if cache.fused else {}
    fused_convs = {conv.name: pool for pool, conv in plan.items()}
    grads_node = {net.output: np.asarray(grad_pred, DTYPE).reshape(n, 1, 1, 1)}
    out = {}

    def push(name, g):
        if not need[name]:
            return
        if name in grads_node:
            grads_node[name] = grads_node[name] + g
        else:
            grads_node[name] = g

    for layer in reversed(net.layers):
        if layer.name in fused_convs or (cache.fused and layer.kind == "relu"
                                         and net.consumers(layer.name)[0].name in plan):
            continue
        g = grads_node.pop(layer.name, None)
        if g is None:
            continue
        if layer.name in plan:
            conv = plan[layer.name]
            p = params[conv.name]
            pm, z, arg, win, src_shape = cache.aux[layer.name]
            gz = np.ascontiguousarray(np.where(z > 0, g.reshape(z.shape), 0), dtype=DTYPE)
            gw = np.zeros((p.c_out, p.c_in), np.float64)
            gb = np.zeros(p.c_out, np.float64)
            src = conv.inputs[0]
            want_x = need[src]
            gx = np.zeros(pm.shape, DTYPE) if want_x else np.zeros((1, 1, 1), DTYPE)
            _kernels.conv_pool_backward(pm, p.matrix, win, arg, gz, gw, gb, gx, want_x)
            out[conv.name] = (gw.astype(DTYPE)[:, :, None, None], gb.astype(DTYPE))
            if want_x:
                nn, c, h, w = src_shape
                push(src, gx.transpose(0, 2, 1).reshape(nn, c, h, w))
        elif layer.kind == "conv":
            gi, gw, gb = pointwise_conv_backward(vals[layer.inputs[0]], params[layer.name], g)
            out[layer.name] = (gw, gb)
            push(layer.inputs[0], gi)
        elif layer.kind == "relu":
            push(layer.inputs[0], relu_backward(vals[layer.inputs[0]], g))
        elif layer.kind == "maxpool":
            push(layer.inputs[0], maxpool_backward(cache.aux[layer.name], g))
        elif layer.kind == "concat":
            start = 0
            for src in layer.inputs:
                c = vals[src].shape[1]
                push(src, g[:, start:start + c])
                start += c
        elif layer.kind == "downsample":
            if need[layer.inputs[0]]:
                raise NotImplementedError("downsample backward is only defined for data inputs")
    return out


def predict(net: NetworkSpec, params: dict, x: np.ndarray, batch: int = 256) -> np.ndarray:
    preds = [forward(net, params, x[i:i + batch])[0] for i in range(0, len(x), batch)]
    return np.concatenate(preds) if preds else np.zeros(0, DTYPE)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0 or pred.shape != target.shape:
        raise ValueError(f"mse_loss needs equal non-empty vectors, got {pred.shape} and {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(DTYPE)


@dataclass
class TrainConfig:
    iterations: int = 50_000
    batch_size: int = 128
    base_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-6
    seed: int = 0
    lr_step: int = 10_000
    lr_floor: float = 3.125e-4
    log_every: int = 100

    def __post_init__(self):
        for name in ("iterations", "batch_size", "base_lr", "lr_step", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")

    def lr(self, iteration: int) -> float:
        return lr_schedule(iteration, self.base_lr, self.lr_step, self.lr_floor)


@dataclass
class TrainResult:
    curve: list  # rows of (iteration, mean loss over the block, lr at block start)
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.curve[-1][1]


def _batches(n: int, size: int, rng: np.random.Generator):
    size = min(size, n)
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + size > n:
            order = np.concatenate([order[pos:], rng.permutation(n)])
            pos = 0
        yield order[pos:pos + size]
        pos += size


def train(net: NetworkSpec, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
          params: dict | None = None, label: str = ""):
    """Fit ``net`` to scalar targets with momentum SGD and MSE loss.

    Returns ``(params, TrainResult)``. Raises :class:`TrainingError` on a
    non-finite loss, naming the iteration.
    """
    inputs = np.ascontiguousarray(inputs, dtype=DTYPE)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0 or len(inputs) != len(targets):
        raise ValueError("training set must be non-empty with one target per input")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(net, rng)
    validate_params(net, params)
    flat = _flat(params)
    state = OptimizerState()
    batches = _batches(len(inputs), cfg.batch_size, rng)
    curve, acc, count = [], 0.0, 0
    block_lr = cfg.lr(0)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        lr = cfg.lr(it)
        if it % cfg.log_every == 0:
            block_lr = lr
        idx = next(batches)
        pred, cache = forward(net, params, inputs[idx])
        loss, grad = mse_loss(pred, targets[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"{label or net.name}: non-finite loss at iteration {it}")
        grads = backward(net, params, cache, grad)
        try:
            sgd_step(flat, _flat_grads(grads), state, lr, cfg.momentum, cfg.weight_decay)
        except NumericError as exc:
            raise TrainingError(f"{label or net.name}: {exc} (iteration {it})") from exc
        acc += loss
        count += 1
        if count == cfg.log_every or it == cfg.iterations - 1:
            start = it - count + 1
            curve.append((start, acc / count, block_lr))
            if start % (10 * cfg.log_every) == 0:
                log.debug("%s it %d loss %.5g lr %.3g", label or net.name, start, acc / count, block_lr)
            acc, count = 0.0, 0
    return params, TrainResult(curve, time.perf_counter() - t0)
