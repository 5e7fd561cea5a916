"""Image embedding networks used by the semantic consistency loss.

``ViTEncoder`` runs a pre-norm Vision Transformer from weights stored in a
``VITW`` container. ``BaselineEncoder`` is a cheap seeded stand-in with the
same interface. Both are differentiable with respect to the input image and
return unit-norm vectors.

Container tensor names (``D`` hidden size, ``P`` patch size)::

    patch_embed.weight   (P*P*3, D)   rows ordered (patch_row, patch_col, channel)
    patch_embed.bias     (D,)
    class_token          (D,)
    pos_embed            (1 + (R/P)**2, D)
    ln_pre.weight/bias   (D,)         only when spec["ln_pre"] is true
    blocks.{i}.ln1.weight/bias, blocks.{i}.ln2.weight/bias   (D,)
    blocks.{i}.attn.qkv.weight (D, 3D), blocks.{i}.attn.qkv.bias (3D,)
    blocks.{i}.attn.out.weight (D, D),  blocks.{i}.attn.out.bias (D,)
    blocks.{i}.mlp.fc1.weight (D, M), blocks.{i}.mlp.fc1.bias (M,)
    blocks.{i}.mlp.fc2.weight (M, D), blocks.{i}.mlp.fc2.bias (D,)
    ln_post.weight/bias  (D,)
    proj.weight          (D, output_dim)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .container import ContainerError, read_container, write_container
from .diffcore import Tensor

VIT_MAGIC = b"VITW"
VIT_VERSION = 1

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class WeightError(ContainerError):
    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(message)


@dataclass(frozen=True)
class ViTSpec:
    image_resolution: int = 224
    patch_size: int = 32
    hidden_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    output_dim: int = 512
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD
    resize: str = "bilinear"
    ln_pre: bool = True
    activation: str = "quick_gelu"

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if self.image_resolution % self.patch_size:
            raise WeightError(f"resolution {self.image_resolution} not divisible by patch {self.patch_size}")
        if self.hidden_dim % self.num_heads:
            raise WeightError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.num_heads}")
        if self.resize != "bilinear":
            raise WeightError(f"unsupported resize filter {self.resize!r}")
        if self.activation not in ("gelu", "quick_gelu"):
            raise WeightError(f"unsupported activation {self.activation!r}")

    @property
    def grid(self) -> int:
        return self.image_resolution // self.patch_size

    @property
    def num_tokens(self) -> int:
        return 1 + self.grid ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.hidden_dim * self.mlp_ratio))

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, p, m = self.hidden_dim, self.patch_size, self.mlp_dim
        shapes = {
            "patch_embed.weight": (p * p * 3, d),
            "patch_embed.bias": (d,),
            "class_token": (d,),
            "pos_embed": (self.num_tokens, d),
        }
        if self.ln_pre:
            shapes["ln_pre.weight"] = shapes["ln_pre.bias"] = (d,)
        for i in range(self.num_layers):
            b = f"blocks.{i}."
            shapes.update({
                b + "ln1.weight": (d,), b + "ln1.bias": (d,),
                b + "attn.qkv.weight": (d, 3 * d), b + "attn.qkv.bias": (3 * d,),
                b + "attn.out.weight": (d, d), b + "attn.out.bias": (d,),
                b + "ln2.weight": (d,), b + "ln2.bias": (d,),
                b + "mlp.fc1.weight": (d, m), b + "mlp.fc1.bias": (m,),
                b + "mlp.fc2.weight": (m, d), b + "mlp.fc2.bias": (d,),
            })
        shapes["ln_post.weight"] = shapes["ln_post.bias"] = (d,)
        shapes["proj.weight"] = (d, self.output_dim)
        return shapes


def toy_spec() -> ViTSpec:
    """2 layers, width 64, 8-pixel patches at 32x32: small enough for CPU tests."""
    return ViTSpec(image_resolution=32, patch_size=8, hidden_dim=64, num_layers=2, num_heads=4,
                   mlp_ratio=4.0, output_dim=32, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                   ln_pre=False, activation="gelu")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, edge clamped."""
    if n_in == n_out:
        return np.eye(n_in, dtype=np.float32)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(np.float32)


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) area-averaging matrix; handles non-integer ratios."""
    edges = np.linspace(0, n_in, n_out + 1)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        for j in range(n_in):
            m[i, j] = max(0.0, min(edges[i + 1], j + 1) - max(edges[i], j))
    return (m / m.sum(axis=1, keepdims=True)).astype(np.float32)


def _check_image(image) -> Tensor:
    image = dc.as_tensor(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise dc.ShapeError("encode", image.shape)
    dc.assert_finite(image, "encoder input")
    return image


def _resample(image: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply separable resampling matrices to an H x W x 3 image; returns 3 x h x w."""
    chw = dc.transpose(image, (2, 0, 1))
    return (rows @ chw) @ cols.T


class ViTEncoder:
    def __init__(self, spec: ViTSpec, weights: dict[str, np.ndarray]):
        self.spec = spec
        self.weights = {k: Tensor(v) for k, v in weights.items()}
        self._resize_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def dim(self) -> int:
        return self.spec.output_dim

    def _resize(self, image: Tensor) -> Tensor:
        h, w = image.shape[:2]
        r = self.spec.image_resolution
        if (h, w) not in self._resize_cache:
            self._resize_cache[(h, w)] = bilinear_matrix(h, r), bilinear_matrix(w, r)
        rows, cols = self._resize_cache[(h, w)]
        return _resample(image, rows, cols)

    def _act(self, x: Tensor) -> Tensor:
        return dc.gelu(x) if self.spec.activation == "gelu" else dc.quick_gelu(x)

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        s, w = self.spec, self.weights
        n, d = x.shape
        hd = d // s.num_heads
        qkv = x @ w[prefix + "qkv.weight"] + w[prefix + "qkv.bias"]
        qkv = dc.transpose(dc.reshape(qkv, (n, 3, s.num_heads, hd)), (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ dc.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(hd))
        out = dc.softmax(scores, axis=-1) @ v
        out = dc.reshape(dc.transpose(out, (1, 0, 2)), (n, d))
        return out @ w[prefix + "out.weight"] + w[prefix + "out.bias"]

    def patch_tokens(self, image) -> Tensor:
        """Resized, normalized, patch-embedded image: (grid**2, hidden_dim), no position terms."""
        s, w = self.spec, self.weights
        x = self._resize(_check_image(image))
        mean = np.asarray(s.mean, np.float32).reshape(3, 1, 1)
        std = np.asarray(s.std, np.float32).reshape(3, 1, 1)
        x = (x - mean) * (1.0 / std)
        g, p = s.grid, s.patch_size
        patches = dc.transpose(dc.reshape(x, (3, g, p, g, p)), (1, 3, 2, 4, 0))
        patches = dc.reshape(patches, (g * g, p * p * 3))
        return patches @ w["patch_embed.weight"] + w["patch_embed.bias"]

    def encode(self, image) -> Tensor:
        """Unit-norm embedding of an H x W x 3 image with values in [0, 1]."""
        s, w = self.spec, self.weights
        tokens = self.patch_tokens(image)
        cls = dc.reshape(w["class_token"], (1, s.hidden_dim))
        x = dc.concat([cls, tokens], axis=0) + w["pos_embed"]
        if s.ln_pre:
            x = dc.layer_norm(x, w["ln_pre.weight"], w["ln_pre.bias"])
        for i in range(s.num_layers):
            b = f"blocks.{i}."
            x = x + self._attention(dc.layer_norm(x, w[b + "ln1.weight"], w[b + "ln1.bias"]), b + "attn.")
            h = dc.layer_norm(x, w[b + "ln2.weight"], w[b + "ln2.bias"])
            h = self._act(h @ w[b + "mlp.fc1.weight"] + w[b + "mlp.fc1.bias"])
            x = x + (h @ w[b + "mlp.fc2.weight"] + w[b + "mlp.fc2.bias"])
        cls_state = dc.layer_norm(x[0:1], w["ln_post.weight"], w["ln_post.bias"])
        emb = dc.reshape(cls_state @ w["proj.weight"], (s.output_dim,))
        return normalize(emb)


def normalize(v: Tensor) -> Tensor:
    return v / dc.sqrt(dc.sum_(dc.square(v)))


def _spec_to_header(spec: ViTSpec) -> dict:
    d = asdict(spec)
    d["mean"], d["std"] = list(spec.mean), list(spec.std)
    return d


def save_vit(path, spec: ViTSpec, weights: dict[str, np.ndarray]) -> None:
    expected = spec.tensor_shapes()
    ordered = {name: np.asarray(weights[name], np.float32) for name in expected}
    write_container(path, VIT_MAGIC, VIT_VERSION, {"spec": _spec_to_header(spec)}, ordered)


def load_vit(path) -> ViTEncoder:
    header, tensors = read_container(path, VIT_MAGIC, (VIT_VERSION,))
    try:
        spec = ViTSpec(**header["spec"])
    except (KeyError, TypeError) as exc:
        raise WeightError(f"{path}: invalid spec in header ({exc})") from None
    for name, shape in spec.tensor_shapes().items():
        if name not in tensors:
            raise WeightError(f"{path}: missing tensor {name!r}", name)
        if tensors[name].shape != tuple(shape):
            raise WeightError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                              f"expected {tuple(shape)}", name)
    return ViTEncoder(spec, tensors)


def make_test_weights(spec: ViTSpec, seed: int, path) -> None:
    """Write a container of seeded random weights for ``spec``.

    Dense weights are N(0, 1/fan_in) so activations stay O(1) and the
    embedding actually depends on the image; norms are identity.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith(("ln1.weight", "ln2.weight", "ln_pre.weight", "ln_post.weight")):
            weights[name] = np.ones(shape, np.float32)
        elif name.endswith("bias"):
            weights[name] = np.zeros(shape, np.float32)
        elif name in ("class_token", "pos_embed"):
            weights[name] = (0.02 * rng.standard_normal(shape)).astype(np.float32)
        else:
            weights[name] = (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(np.float32)
    save_vit(Path(path), spec, weights)


class BaselineEncoder:
    """Seeded stand-in for a pretrained encoder.

    The image is area-pooled to a 4x4 grid, mapped from [0, 1] to [-1, 1],
    flattened, sent through a fixed Gaussian projection and ``tanh``, then
    L2-normalized. It tells images apart; it is not view invariant.
    """

    grid = 4

    def __init__(self, seed: int = 0, dim: int = 32):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.seed, self._dim = seed, dim
        n_in = self.grid * self.grid * 3
        rng = np.random.default_rng(seed)
        self.projection = (rng.standard_normal((n_in, dim)) / np.sqrt(n_in)).astype(np.float32)
        self._pool_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def dim(self) -> int:
        return self._dim

    def encode(self, image) -> Tensor:
        image = _check_image(image)
        h, w = image.shape[:2]
        if (h, w) not in self._pool_cache:
            self._pool_cache[(h, w)] = area_matrix(h, self.grid), area_matrix(w, self.grid)
        rows, cols = self._pool_cache[(h, w)]
        pooled = _resample(image, rows, cols)  # 3 x 4 x 4
        flat = dc.reshape(dc.transpose(pooled, (1, 2, 0)), (1, self.grid * self.grid * 3))
        z = dc.tanh((flat * 2.0 - 1.0) @ self.projection)
        return normalize(dc.reshape(z, (self._dim,)))


def baseline_encoder(seed: int = 0, dim: int = 32) -> BaselineEncoder:
    return BaselineEncoder(seed, dim)
