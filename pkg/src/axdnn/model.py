"""Model descriptions, parameter containers, and the float forward/backward passes.

A model is a flat sequence of layer specs. Parameter-bearing layers get
stable names (conv1, conv2, ..., dense1, ...) that the quantizer and the
multiplier routing refer to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class AvgPool:
    kernel: int = 2


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Conv2D | AvgPool | Dense | ReLU | Flatten


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError(f"{self.name}: a model needs at least one layer")
        infer_shapes(self)  # raises on a non-composing stack

    @property
    def layer_names(self) -> tuple[str, ...]:
        """One stable name per layer; parameter-bearing names are conv<i>/dense<i>."""
        counts: dict[str, int] = {}
        names = []
        for layer in self.layers:
            kind = _KIND[type(layer)]
            counts[kind] = counts.get(kind, 0) + 1
            names.append(f"{kind}{counts[kind]}")
        return tuple(names)

    @property
    def mult_layer_names(self) -> tuple[str, ...]:
        return tuple(n for n, l in zip(self.layer_names, self.layers)
                     if isinstance(l, (Conv2D, Dense)))

    @property
    def conv_layer_names(self) -> tuple[str, ...]:
        return tuple(n for n, l in zip(self.layer_names, self.layers)
                     if isinstance(l, Conv2D))


_KIND = {Conv2D: "conv", AvgPool: "pool", Dense: "dense", ReLU: "relu",
         Flatten: "flatten"}


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (channel-first, without the batch axis)."""
    shape: tuple[int, ...] = tuple(spec.input_shape)
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise ValueError(f"{spec.name}: input_shape must be (C, H, W) positive, "
                         f"got {shape}")
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2D):
            if len(shape) != 3:
                raise ValueError(f"{spec.name}: layer {i} (conv) needs a (C, H, W) "
                                 f"input, got {shape}")
            if layer.stride != 1:
                raise ValueError(f"{spec.name}: only stride-1 convolutions are "
                                 f"supported, layer {i} has stride {layer.stride}")
            c, h, w = shape
            ho = h + 2 * layer.pad - layer.kernel + 1
            wo = w + 2 * layer.pad - layer.kernel + 1
            if ho <= 0 or wo <= 0:
                raise ValueError(f"{spec.name}: layer {i} kernel {layer.kernel} does "
                                 f"not fit {h}x{w} input with pad {layer.pad}")
            shape = (layer.out_channels, ho, wo)
        elif isinstance(layer, AvgPool):
            if len(shape) != 3:
                raise ValueError(f"{spec.name}: layer {i} (pool) needs a (C, H, W) "
                                 f"input, got {shape}")
            c, h, w = shape
            if h < layer.kernel or w < layer.kernel:
                raise ValueError(f"{spec.name}: layer {i} pool kernel {layer.kernel} "
                                 f"exceeds input {h}x{w}")
            shape = (c, h // layer.kernel, w // layer.kernel)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ValueError(f"{spec.name}: layer {i} (dense) needs a flat input, "
                                 f"got {shape}; insert Flatten first")
            shape = (layer.out_features,)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise ValueError(f"{spec.name}: unknown layer spec {layer!r}")
        shapes.append(shape)
    return shapes


def lenet5(input_shape: tuple[int, int, int] = (1, 32, 32)) -> ModelSpec:
    return ModelSpec("lenet5", input_shape, (
        Conv2D(6, 5), ReLU(), AvgPool(),
        Conv2D(16, 5), ReLU(), AvgPool(),
        Conv2D(120, 5), ReLU(),
        Flatten(), Dense(84), ReLU(), Dense(10),
    ))


def alexnet_mini(input_shape: tuple[int, int, int] = (1, 28, 28)) -> ModelSpec:
    return ModelSpec("alexnet_mini", input_shape, (
        Conv2D(32, 3, pad=1), ReLU(), Conv2D(32, 3, pad=1), ReLU(), AvgPool(),
        Conv2D(64, 3, pad=1), ReLU(), AvgPool(),
        Conv2D(64, 3, pad=1), ReLU(), Conv2D(128, 3, pad=1), ReLU(), AvgPool(),
        Flatten(), Dense(256), ReLU(), Dense(10),
    ))


def ffnn(input_shape: tuple[int, int, int] = (1, 28, 28)) -> ModelSpec:
    return ModelSpec("ffnn", input_shape, (
        Flatten(), Dense(256), ReLU(), Dense(128), ReLU(), Dense(10),
    ))


PRESETS = {"lenet5": lenet5, "alexnet_mini": alexnet_mini, "ffnn": ffnn}


def build_preset(name: str, input_shape: tuple[int, int, int] | None = None) -> ModelSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name](input_shape) if input_shape else PRESETS[name]()


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    shapes = infer_shapes(spec)
    params: dict[str, np.ndarray] = {}
    for i, (name, layer) in enumerate(zip(spec.layer_names, spec.layers)):
        in_shape = tuple(spec.input_shape) if i == 0 else shapes[i - 1]
        if isinstance(layer, Conv2D):
            c_in = in_shape[0]
            fan_in = c_in * layer.kernel * layer.kernel
            bound = math.sqrt(6.0 / fan_in)
            params[f"{name}.w"] = rng.uniform(
                -bound, bound,
                (layer.out_channels, c_in, layer.kernel, layer.kernel),
            ).astype(np.float32)
            params[f"{name}.b"] = np.zeros(layer.out_channels, dtype=np.float32)
        elif isinstance(layer, Dense):
            fan_in = in_shape[0]
            bound = math.sqrt(6.0 / fan_in)
            params[f"{name}.w"] = rng.uniform(
                -bound, bound, (layer.out_features, fan_in)).astype(np.float32)
            params[f"{name}.b"] = np.zeros(layer.out_features, dtype=np.float32)
    return params


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Expected shape of every parameter tensor."""
    shapes = infer_shapes(spec)
    out: dict[str, tuple[int, ...]] = {}
    for i, (name, layer) in enumerate(zip(spec.layer_names, spec.layers)):
        in_shape = tuple(spec.input_shape) if i == 0 else shapes[i - 1]
        if isinstance(layer, Conv2D):
            out[f"{name}.w"] = (layer.out_channels, in_shape[0], layer.kernel,
                                layer.kernel)
            out[f"{name}.b"] = (layer.out_channels,)
        elif isinstance(layer, Dense):
            out[f"{name}.w"] = (layer.out_features, in_shape[0])
            out[f"{name}.b"] = (layer.out_features,)
    return out


class Model:
    """A ModelSpec plus its float parameters."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        expected = param_shapes(spec)
        if set(params) != set(expected):
            raise ValueError(f"parameter set mismatch: missing "
                             f"{sorted(set(expected) - set(params))}, unexpected "
                             f"{sorted(set(params) - set(expected))}")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise ValueError(f"parameter {k} has shape {params[k].shape}, "
                                 f"expected {shape}")
        self.spec = spec
        self.params = params

    @classmethod
    def initialized(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        return cls(spec, init_params(spec, seed))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.spec.input_shape)

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input of shape (N, {', '.join(map(str, self.input_shape))}), "
                             f"got {x.shape}")

    def forward(self, x: np.ndarray, with_cache: bool = False):
        """Logits for a (N, C, H, W) batch; optionally keep per-layer caches."""
        self._check_input(x)
        cache = []
        act = x
        for name, layer in zip(self.spec.layer_names, self.spec.layers):
            if isinstance(layer, Conv2D):
                w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
                out, cols = ops.conv2d_forward(act, w.astype(act.dtype),
                                               b.astype(act.dtype), layer.pad)
                cache.append((layer, name, act.shape, cols))
            elif isinstance(layer, Dense):
                w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
                out = ops.dense_forward(act, w.astype(act.dtype), b.astype(act.dtype))
                cache.append((layer, name, act, None))
            elif isinstance(layer, AvgPool):
                out = ops.avgpool2d_forward(act, layer.kernel)
                cache.append((layer, name, act.shape, None))
            elif isinstance(layer, ReLU):
                out = ops.relu_forward(act)
                cache.append((layer, name, act, None))
            elif isinstance(layer, Flatten):
                out = act.reshape(act.shape[0], -1)
                cache.append((layer, name, act.shape, None))
            act = out
        return (act, cache) if with_cache else act

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def backward(self, cache, dlogits: np.ndarray, need_param_grads: bool = True):
        """Propagate dlogits back through the cache from forward(with_cache=True).

        Returns (dx, grads) where grads maps param names to gradients
        (empty when need_param_grads is False).
        """
        grads: dict[str, np.ndarray] = {}
        d = dlogits
        for layer, name, stashed, cols in reversed(cache):
            if isinstance(layer, Conv2D):
                w = self.params[f"{name}.w"].astype(d.dtype)
                d, dw, db = ops.conv2d_backward(d, cols, stashed, w, layer.pad)
                if need_param_grads:
                    grads[f"{name}.w"] = dw
                    grads[f"{name}.b"] = db
            elif isinstance(layer, Dense):
                w = self.params[f"{name}.w"].astype(d.dtype)
                d, dw, db = ops.dense_backward(d, stashed, w)
                if need_param_grads:
                    grads[f"{name}.w"] = dw
                    grads[f"{name}.b"] = db
            elif isinstance(layer, AvgPool):
                d = ops.avgpool2d_backward(d, stashed, layer.kernel)
            elif isinstance(layer, ReLU):
                d = ops.relu_backward(d, stashed)
            elif isinstance(layer, Flatten):
                d = d.reshape(stashed)
        return d, grads

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """(loss, param grads) for a labeled batch."""
        logits, cache = self.forward(x, with_cache=True)
        loss, dlogits = ops.softmax_cross_entropy(logits, y)
        _, grads = self.backward(cache, dlogits, need_param_grads=True)
        return loss, grads

    def loss_and_input_grad(self, x: np.ndarray, y: np.ndarray):
        """(loss, dloss/dx) without materializing parameter gradients."""
        logits, cache = self.forward(x, with_cache=True)
        loss, dlogits = ops.softmax_cross_entropy(logits, y)
        dx, _ = self.backward(cache, dlogits, need_param_grads=False)
        return loss, dx

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)
