"""Minimal numpy network core: conv2d, dense, relu, sigmoid, flatten, reshape.

Every layer works on batched arrays with a leading sample axis. ``forward``
returns the output together with a cache; ``backward`` consumes that cache and
returns the input gradient plus one gradient per parameter, in the same order
as :meth:`Network.parameters`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class ConfigError(ValueError):
    """Raised for an invalid layer configuration."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf would leave a public operation."""


class StaleCacheError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if kernel > size + 2 * pad:
        raise ConfigError(f"kernel extent {kernel} exceeds padded input extent {size + 2 * pad}")
    span = size + 2 * pad - kernel
    if span % stride:
        raise ConfigError(
            f"output extent ({size} + 2*{pad} - {kernel})/{stride} + 1 is not an integer"
        )
    return span // stride + 1


def conv2d_forward(x, kernel, bias, stride=1, pad=0):
    """Cross-correlate ``x`` with ``kernel``.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kH, kW]``. Each output element is the dot product of the
    kernel with the matching zero-padded input window, plus the channel bias.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must have rank 3 or 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must have rank 4, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    ho = conv_output_extent(x.shape[2], kh, stride, pad)
    wo = conv_output_extent(x.shape[3], kw, stride, pad)
    out = np.tensordot(_windows(x, kh, kw, stride, pad), kernel, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return out[0] if single else np.ascontiguousarray(out)


def _windows(x, kh, kw, stride, pad):
    """Strided view ``[N, C, Ho, Wo, kh, kw]`` of the zero-padded input."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d_backward(x, kernel, stride, pad, dy):
    """Gradients of a conv2d w.r.t. input, kernel and bias (batched arrays)."""
    c_out, c_in, kh, kw = kernel.shape
    n, _, h, w = x.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dk = np.tensordot(dy, _windows(x, kh, kw, stride, pad), axes=([0, 2, 3], [0, 2, 3]))
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dy, kernel, axes=([1], [0]))  # [N, Ho, Wo, C, kh, kw]
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return dx, dk.astype(kernel.dtype, copy=False), db


# --------------------------------------------------------------------------
# Layer specs and layers


LAYER_KINDS = ("conv2d", "dense", "relu", "sigmoid", "flatten", "reshape")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    units: int = 0
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0):
            raise ConfigError(f"bad conv2d spec {self}")
        if self.kind == "dense" and self.units < 1:
            raise ConfigError(f"dense layer needs units >= 1, got {self.units}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride, pad=self.pad)
        elif self.kind == "dense":
            d["units"] = self.units
        elif self.kind == "reshape":
            d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(**d)


def conv(out_channels, kernel, stride=1, pad=0) -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)


def dense(units) -> LayerSpec:
    return LayerSpec("dense", units=units)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


class Layer:
    param_names: tuple[str, ...] = ()

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...]):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = self.infer_shape(self.in_shape)
        self.params: dict[str, np.ndarray] = {}

    def infer_shape(self, in_shape):
        return in_shape

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Conv2D(Layer):
    param_names = ("kernel", "bias")

    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects [C, H, W] samples, got {in_shape}")
        s = self.spec
        _, h, w = in_shape
        return (s.out_channels, conv_output_extent(h, s.kernel, s.stride, s.pad),
                conv_output_extent(w, s.kernel, s.stride, s.pad))

    def init_params(self, rng):
        s = self.spec
        fan_in = self.in_shape[0] * s.kernel * s.kernel
        k = rng.standard_normal((s.out_channels, self.in_shape[0], s.kernel, s.kernel)) * np.sqrt(2.0 / fan_in)
        self.params = {"kernel": k.astype(DTYPE), "bias": np.zeros(s.out_channels, DTYPE)}

    def forward(self, x):
        y = conv2d_forward(x, self.params["kernel"], self.params["bias"], self.spec.stride, self.spec.pad)
        return y, x

    def backward(self, x, dy):
        dx, dk, db = conv2d_backward(x, self.params["kernel"], self.spec.stride, self.spec.pad, dy)
        return dx, [dk, db]


class Dense(Layer):
    param_names = ("weight", "bias")

    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects flat samples, got {in_shape}")
        return (self.spec.units,)

    def init_params(self, rng):
        fan_in = self.in_shape[0]
        w = rng.standard_normal((self.spec.units, fan_in)) * np.sqrt(2.0 / fan_in)
        self.params = {"weight": w.astype(DTYPE), "bias": np.zeros(self.spec.units, DTYPE)}

    def forward(self, x):
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, x, dy):
        return dy @ self.params["weight"], [dy.T @ x, dy.sum(axis=0)]


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dy):
        return dy * mask, []


class Sigmoid(Layer):
    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, y, dy):
        return dy * y * (1.0 - y), []


class Flatten(Layer):
    def infer_shape(self, in_shape):
        return (prod(in_shape),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape), []


class Reshape(Layer):
    def infer_shape(self, in_shape):
        if prod(in_shape) != prod(self.spec.shape):
            raise ShapeError(f"cannot reshape {in_shape} into {self.spec.shape}")
        return tuple(self.spec.shape)

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.out_shape), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape), []


_LAYER_TYPES = {"conv2d": Conv2D, "dense": Dense, "relu": ReLU, "sigmoid": Sigmoid,
                "flatten": Flatten, "reshape": Reshape}


@dataclass
class ForwardCache:
    network_id: int
    version: int
    entries: list


class Network:
    """A sequential chain of layers built from specs for a fixed sample shape."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], seed: int | None = 0):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers: list[Layer] = []
        shape = self.input_shape
        rng = np.random.default_rng(seed)
        for idx, spec in enumerate(self.specs):
            try:
                layer = _LAYER_TYPES[spec.kind](spec, shape)
            except (ShapeError, ConfigError) as exc:
                raise type(exc)(f"layer {idx} ({spec.kind}): {exc}") from None
            layer.init_params(rng)
            self.layers.append(layer)
            shape = layer.out_shape
        self.output_shape = shape
        self.version = 0

    def parameters(self) -> list[np.ndarray]:
        return [layer.params[name] for layer in self.layers for name in layer.param_names]

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        slots = [(layer, name) for layer in self.layers for name in layer.param_names]
        if len(arrays) != len(slots):
            raise ShapeError(f"expected {len(slots)} parameter tensors, got {len(arrays)}")
        for (layer, name), arr in zip(slots, arrays):
            if arr.shape != layer.params[name].shape:
                raise ShapeError(f"parameter {name} expects {layer.params[name].shape}, got {arr.shape}")
            layer.params[name] = np.array(arr, dtype=layer.params[name].dtype)
        self.version += 1

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for name in layer.param_names:
                layer.params[name] = layer.params[name].astype(dtype)
        self.version += 1
        return self

    def __len__(self):
        return len(self.layers)


def forward(network: Network, x: np.ndarray):
    """Run ``x`` (batched) through ``network``; returns ``(output, cache)``."""
    x = np.asarray(x)
    if tuple(x.shape[1:]) != network.input_shape:
        raise ShapeError(f"layer 0: expected samples of shape {network.input_shape}, got {x.shape[1:]}")
    entries = []
    for layer in network.layers:
        x, c = layer.forward(x)
        entries.append(c)
    _check_finite(x, "network output")
    return x, ForwardCache(id(network), network.version, entries)


def backward(network: Network, cache: ForwardCache, grad: np.ndarray):
    """Backpropagate ``grad`` through ``network``; returns ``(param_grads, input_grad)``."""
    if (cache.network_id != id(network) or cache.version != network.version
            or len(cache.entries) != len(network.layers)):
        raise StaleCacheError("cache does not belong to the current state of this network")
    grads: list[list[np.ndarray]] = []
    for layer, c in zip(reversed(network.layers), reversed(cache.entries)):
        grad, g = layer.backward(c, grad)
        grads.append(g)
    flat = [g for layer_grads in reversed(grads) for g in layer_grads]
    return flat, grad


def mse_loss(pred, target):
    """Mean squared error and its gradient ``2 (pred - target) / N``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / n)
    return loss, (2.0 / n) * diff


# --------------------------------------------------------------------------
# Optimizers


@dataclass
class OptimizerState:
    kind: str = "sgd-momentum"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocities: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


def optimizer_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Update ``params`` in place and return them.

    Plain SGD: ``p <- p - lr * (g + wd * p)``. With momentum the bracketed term
    feeds a velocity buffer ``v <- mu * v + (g + wd * p)`` and ``p <- p - lr * v``.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
        _check_finite(g, "gradient")
    if state.kind == "sgd-momentum" and not state.velocities:
        state.velocities = [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        step = g + state.weight_decay * p if state.weight_decay else g
        if state.kind == "sgd-momentum":
            v = state.velocities[i]
            v *= state.momentum
            v += step
            step = v
        p -= (state.lr * step).astype(p.dtype, copy=False)
    return params


def apply_step(network: Network, state: OptimizerState, grads) -> None:
    optimizer_step(state, network.parameters(), grads)
    network.version += 1
