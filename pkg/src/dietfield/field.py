"""Radiance field: sinusoidal positional encoding feeding an MLP.

Density comes from a position-only trunk; color optionally also sees the
encoded viewing direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class EncodingConfig:
    num_freqs_position: int = 10
    num_freqs_direction: int = 4
    include_input: bool = True
    scene_scale: float = 1.0

    def __post_init__(self):
        if self.num_freqs_position < 1:
            raise ValueError("num_freqs_position must be >= 1")
        if self.num_freqs_direction < 0:
            raise ValueError("num_freqs_direction must be >= 0")

    @property
    def position_dim(self) -> int:
        return encoded_dim(3, self.num_freqs_position, self.include_input)

    @property
    def direction_dim(self) -> int:
        return encoded_dim(3, self.num_freqs_direction, self.include_input)


@dataclass(frozen=True)
class FieldConfig:
    depth: int = 8
    width: int = 256
    skip_layers: tuple[int, ...] = (4,)
    view_dependent: bool = True
    rematerialize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "skip_layers", tuple(int(k) for k in self.skip_layers))
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        for k in self.skip_layers:
            if not 0 < k < self.depth:
                raise ValueError(f"skip layer {k} outside (0, {self.depth})")


def full_regime() -> tuple[FieldConfig, EncodingConfig]:
    return FieldConfig(), EncodingConfig(10, 4)


def simplified_regime(max_freq_log2: int = 5, view_dependent: bool = False) -> tuple[FieldConfig, EncodingConfig]:
    """Single coarse network with the highest encoding frequency ``2**max_freq_log2``."""
    return FieldConfig(view_dependent=view_dependent), EncodingConfig(max_freq_log2 + 1, 4)


@dataclass(frozen=True, eq=False)
class FieldParams:
    config: FieldConfig
    encoding: EncodingConfig
    tensors: Mapping[str, np.ndarray | Tensor]

    def bind(self, tensors: Mapping[str, np.ndarray | Tensor]) -> "FieldParams":
        return replace(self, tensors=dict(tensors))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in self.tensors.items()}


@dataclass(eq=False)
class FieldOutput:
    rgb: Tensor  # N x 3 in [0, 1]
    sigma: Tensor  # N, >= 0


def encoded_dim(d: int, num_freqs: int, include_input: bool) -> int:
    return d * int(include_input) + 2 * d * num_freqs


def positional_encode(points, num_freqs: int, include_input: bool = True) -> Tensor:
    """Map N x D points to ``[x, sin(x), cos(x), sin(2x), cos(2x), ...]``.

    Frequencies are 2**0 ... 2**(num_freqs - 1).
    """
    x = dc.as_tensor(points)
    n, d = x.shape
    parts = [x] if include_input else []
    if num_freqs > 0:
        freqs = (2.0 ** np.arange(num_freqs, dtype=np.float32)).reshape(1, num_freqs, 1)
        scaled = dc.reshape(x, (n, 1, d)) * freqs
        sc = dc.concat([dc.reshape(dc.sin(scaled), (n, num_freqs, 1, d)),
                        dc.reshape(dc.cos(scaled), (n, num_freqs, 1, d))], axis=2)
        parts.append(dc.reshape(sc, (n, 2 * num_freqs * d)))
    if not parts:
        raise ValueError("empty encoding")
    return parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)


def layer_shapes(config: FieldConfig, encoding: EncodingConfig) -> dict[str, tuple[int, int]]:
    pos, w = encoding.position_dim, config.width
    shapes = {}
    for k in range(config.depth):
        fan_in = pos if k == 0 else w + (pos if k in config.skip_layers else 0)
        shapes[f"trunk.{k}"] = (fan_in, w)
    shapes["sigma"] = (w, 1)
    if config.view_dependent:
        shapes["feature"] = (w, w)
        shapes["view"] = (w + encoding.direction_dim, w // 2)
        shapes["rgb"] = (w // 2, 3)
    else:
        shapes["rgb"] = (w, 3)
    return shapes


def init_params(config: FieldConfig, encoding: EncodingConfig, seed: int) -> FieldParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (fan_in, fan_out) in layer_shapes(config, encoding).items():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)
        tensors[f"{name}.bias"] = np.zeros(fan_out, np.float32)
    return FieldParams(config, encoding, tensors)


def _dense_relu(h, w, b):
    return dc.relu(dc.linear(h, w, b))


def field_eval(params: FieldParams, positions, directions=None) -> FieldOutput:
    cfg, enc = params.config, params.encoding
    t = {k: dc.as_tensor(v) for k, v in params.tensors.items()}
    positions = dc.as_tensor(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise dc.ShapeError("field_eval", positions.shape)
    if enc.scene_scale != 1.0:
        positions = positions * (1.0 / enc.scene_scale)
    encoded = positional_encode(positions, enc.num_freqs_position, enc.include_input)
    h = encoded
    for k in range(cfg.depth):
        if k in cfg.skip_layers:
            h = dc.concat([h, encoded], axis=1)
        w, b = t[f"trunk.{k}.weight"], t[f"trunk.{k}.bias"]
        h = dc.checkpoint(_dense_relu, h, w, b) if cfg.rematerialize else _dense_relu(h, w, b)
    sigma = dc.softplus(dc.linear(h, t["sigma.weight"], t["sigma.bias"]))
    sigma = dc.reshape(sigma, (sigma.shape[0],))
    if cfg.view_dependent:
        if directions is None:
            raise ValueError("view-dependent field needs directions")
        directions = dc.as_tensor(directions)
        if directions.shape != positions.shape:
            raise dc.ShapeError("field_eval", positions.shape, directions.shape)
        feat = dc.linear(h, t["feature.weight"], t["feature.bias"])
        d = positional_encode(directions, enc.num_freqs_direction, enc.include_input)
        h = dc.relu(dc.linear(dc.concat([feat, d], axis=1), t["view.weight"], t["view.bias"]))
    rgb = dc.sigmoid(dc.linear(h, t["rgb.weight"], t["rgb.bias"]))
    return FieldOutput(rgb, sigma)
