"""Network description, initialisation and the full forward/backward passes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import LAYER_TYPES, Conv2D, Dense

__all__ = [
    "NetworkConfig",
    "reference_config",
    "vgg16_config",
    "build_layers",
    "init_params",
    "count_params",
    "forward",
    "loss_mse",
    "backward",
    "NonFiniteError",
]


class NonFiniteError(FloatingPointError):
    """An activation or gradient became NaN or infinite."""


@dataclass(frozen=True)
class NetworkConfig:
    """Layer stack applied to single-channel square images.

    ``layers`` is a tuple of descriptors: ``("conv", out_channels)``,
    ``("pool",)``, ``("relu",)``, ``("flatten",)``, ``("fc", width)`` and
    ``("sigmoid",)``. The last two entries must be ``("fc", 2)`` and
    ``("sigmoid",)``.
    """

    input_size: int
    layers: tuple
    init: str = "he_uniform"
    dtype: str = "float32"

    def __post_init__(self):
        layers = tuple(tuple(d) for d in self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) < 2 or layers[-1] != ("sigmoid",) or layers[-2] != ("fc", 2):
            raise ValueError("network must end with ('fc', 2) followed by ('sigmoid',)")
        for d in layers:
            if d[0] not in LAYER_TYPES:
                raise ValueError(f"unknown layer kind {d[0]!r}")
        if self.init != "he_uniform":
            raise ValueError(f"unknown initialisation scheme {self.init!r}")
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        # shape-check the whole stack once
        build_layers(self)

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "layers": [list(d) for d in self.layers],
                "init": self.init, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(d["input_size"], tuple(tuple(x) for x in d["layers"]),
                   d.get("init", "he_uniform"), d.get("dtype", "float32"))


def reference_config(input_size: int = 64, dtype: str = "float32") -> NetworkConfig:
    """Three conv-relu-pool blocks (16, 32, 64 channels), fc128, fc2, sigmoid."""
    layers = []
    for ch in (16, 32, 64):
        layers += [("conv", ch), ("relu",), ("pool",)]
    layers += [("flatten",), ("fc", 128), ("relu",), ("fc", 2), ("sigmoid",)]
    return NetworkConfig(input_size, tuple(layers), dtype=dtype)


def vgg16_config(input_size: int = 128, dtype: str = "float32") -> NetworkConfig:
    """VGG-16 with a one-channel input, fc widths 1024 and 2, sigmoid output."""
    layers = []
    for ch, reps in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for _ in range(reps):
            layers += [("conv", ch), ("relu",)]
        layers.append(("pool",))
    layers += [("flatten",), ("fc", 1024), ("relu",), ("fc", 2), ("sigmoid",)]
    return NetworkConfig(input_size, tuple(layers), dtype=dtype)


def build_layers(config: NetworkConfig):
    """Instantiate ``(name, layer)`` pairs, resolving channel and width sizes."""
    shape = (1, config.input_size, config.input_size)
    out = []
    for i, desc in enumerate(config.layers):
        kind = desc[0]
        if kind == "conv":
            if len(shape) != 3:
                raise ValueError("convolution after flatten")
            layer = Conv2D(shape[0], int(desc[1]))
        elif kind == "fc":
            if len(shape) != 1:
                raise ValueError("fully-connected layer needs a flatten first")
            layer = Dense(shape[0], int(desc[1]))
        else:
            layer = LAYER_TYPES[kind]()
        shape = layer.output_shape(shape)
        out.append((f"{kind}{i}", layer))
    if shape != (2,):
        raise ValueError(f"network output shape is {shape}, expected (2,)")
    return out


def init_params(config: NetworkConfig, rng: np.random.Generator) -> dict:
    """He-uniform weights ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``, zero biases."""
    dtype = np.dtype(config.dtype)
    params = {}
    for name, layer in build_layers(config):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        bound = math.sqrt(6.0 / layer.fan_in())
        params[f"{name}.weight"] = rng.uniform(-bound, bound, shapes["weight"]).astype(dtype)
        params[f"{name}.bias"] = np.zeros(shapes["bias"], dtype=dtype)
    return params


def count_params(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


def _layer_params(params, name, layer):
    return {k: params[f"{name}.{k}"] for k in layer.param_shapes()}


def _check_input(config: NetworkConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, config.input_size, config.input_size):
        raise ValueError(
            f"expected images of shape (n, {config.input_size}, {config.input_size}), "
            f"got {x.shape}"
        )
    return x.astype(config.dtype, copy=False)


def _forward(config, params, x, layers=None):
    layers = layers or build_layers(config)
    caches = []
    for name, layer in layers:
        x, cache = layer.forward(_layer_params(params, name, layer), x)
        caches.append(cache)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite network output")
    return x, caches


def forward(config: NetworkConfig, params: dict, images) -> np.ndarray:
    """Network output ``(n, 2)``, each entry strictly inside ``(0, 1)``."""
    x = _check_input(config, images)
    out, _ = _forward(config, params, x)
    return out


def loss_mse(outputs, labels) -> float:
    outputs = np.asarray(outputs)
    labels = np.asarray(labels)
    if outputs.shape != labels.shape:
        raise ValueError(f"output shape {outputs.shape} does not match labels {labels.shape}")
    diff = outputs.astype(np.float64) - labels
    return float(np.mean(diff * diff))


def backward(config: NetworkConfig, params: dict, images, labels):
    """``(loss, grads)`` of the batch-mean squared error for every parameter."""
    layers = build_layers(config)
    x = _check_input(config, images)
    labels = np.asarray(labels)
    out, caches = _forward(config, params, x, layers)
    if out.shape != labels.shape:
        raise ValueError(f"output shape {out.shape} does not match labels {labels.shape}")
    loss = loss_mse(out, labels)
    dout = (2.0 / out.size) * (out - labels.astype(out.dtype))
    grads = {}
    for (name, layer), cache in zip(reversed(layers), reversed(caches)):
        dout, g = layer.backward(_layer_params(params, name, layer), cache, dout)
        for k, v in g.items():
            grads[f"{name}.{k}"] = v
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    return loss, {k: grads[k] for k in params}
