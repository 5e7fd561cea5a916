"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the upstream gradient to
per-parent gradients. ``backward`` walks the recorded tape once in reverse
topological order. ``checkpoint`` drops the activations of a block during the
forward pass and recomputes them when the backward pass reaches the block.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class GradientError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    mask = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(np.maximum(a.data, b.data), (a, b), backward, "maximum")


# ----------------------------------------------------------------------------
# elementwise unary ops

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


_SQRT_HALF = np.float32(np.sqrt(0.5))
_INV_SQRT_2PI = np.float32(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    cdf = (0.5 * (1.0 + erf(x * _SQRT_HALF))).astype(DTYPE)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def quick_gelu(a) -> Tensor:
    """``x * sigmoid(1.702 x)``, the GELU approximation used by CLIP checkpoints."""
    a = as_tensor(a)
    return a * sigmoid(a * 1.702)


# ----------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for a 2-D ``x`` as one tape node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear", weight.shape, bias.shape)
        out += bias.data
        parents.append(bias)

    def backward(g):
        grads = (g @ weight.data.T if x.requires_grad else None,
                 x.data.T @ g if weight.requires_grad else None)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    return _make(out, parents, backward, "linear")


def dot(a, b, axis: int = -1) -> Tensor:
    return sum_(mul(a, b), axis=axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(x, weight=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine terms."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv,)

    out = _make(xhat, (x,), backward, "layer_norm")
    if weight is not None:
        weight = as_tensor(weight)
        if weight.shape != (n,):
            raise ShapeError("layer_norm", x.shape, weight.shape)
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


# ----------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(a, index) -> Tensor:
    """``a[index]``; supports basic slicing and integer-array indexing."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("take", a.shape) from exc
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), backward, "take")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def assert_finite(t, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what}: {bad} non-finite values")


# ----------------------------------------------------------------------------
# backward pass

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def _backprop(output: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    """Propagate ``seed`` from ``output``; return gradients of leaves keyed by id."""
    grads = {id(output): seed.astype(DTYPE, copy=False)}
    leaf_grads = {}
    for node in reversed(_toposort(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaf_grads[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads


def backward(output: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to the named leaves.

    Leaves that do not influence ``output`` get a zero gradient.
    """
    if output.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    found = _backprop(output, np.ones(output.shape, dtype=DTYPE)) if output.requires_grad else {}
    out = {}
    for name, leaf in wrt.items():
        g = found.get(id(leaf))
        out[name] = np.zeros(leaf.shape, DTYPE) if g is None else np.array(g, dtype=DTYPE, order="C")
    return out


def checkpoint(fn: Callable[..., Tensor], *args: Tensor) -> Tensor:
    """Apply ``fn`` without keeping its intermediate activations.

    Everything ``fn`` differentiates through must be passed in ``args``; tensors
    captured by closure receive no gradient. The block is re-run on the backward
    pass, so results are bit-identical to the stored-activation path.
    """
    args = tuple(as_tensor(a) for a in args)
    with no_grad():
        out_data = fn(*args).data

    def backward_(g):
        replay = [Tensor(a.data, requires_grad=a.requires_grad) for a in args]
        with _enable_grad():
            out = fn(*replay)
        if not out.requires_grad:
            return tuple(None for _ in args)
        found = _backprop(out, g)
        return tuple(found.get(id(r)) for r in replay)

    return _make(out_data, args, backward_, "checkpoint")


@contextlib.contextmanager
def precision(dtype):
    """Temporarily compute every op in ``dtype`` (used by gradient checks)."""
    global DTYPE
    prev, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = prev


@contextlib.contextmanager
def _enable_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, True
    try:
        yield
    finally:
        _grad_enabled = prev


# ----------------------------------------------------------------------------
# graphs and gradient checking

class Graph:
    """A differentiable function of named parameters.

    ``fn(params, **inputs)`` receives a dict of leaf tensors and returns a
    Tensor or a dict of Tensors. Parameter arrays are copied at construction.
    """

    def __init__(self, fn: Callable, parameters: Mapping[str, np.ndarray]):
        self.fn = fn
        self.parameters = {k: np.array(v, dtype=DTYPE) for k, v in parameters.items()}
        self._leaves: dict[str, Tensor] = {}

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.parameters.items()}

    def forward(self, **inputs):
        self._leaves = self.leaves()
        return self.fn(self._leaves, **inputs)

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        return backward(output, self._leaves)

    def value_and_grad(self, **inputs) -> tuple[float, dict[str, np.ndarray]]:
        out = self.forward(**inputs)
        return float(out.data.reshape(())), self.backward(out)

    def evaluate(self, parameters: Mapping[str, np.ndarray], **inputs) -> float:
        with no_grad():
            leaves = {k: Tensor(v) for k, v in parameters.items()}
            return float(np.asarray(self.fn(leaves, **inputs).data, dtype=np.float64).reshape(()))

    def evaluate64(self, parameters: Mapping[str, np.ndarray], **inputs) -> float:
        with precision(np.float64):
            return self.evaluate(parameters, **inputs)


def forward(graph: Graph, **inputs):
    return graph.forward(**inputs)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def finite_difference_check(
    graph: Graph,
    eps: float = 1e-3,
    tolerance: float = 1e-2,
    coords_per_param: int | None = 8,
    seed: int = 0,
    abs_floor: float = 1e-4,
    analytic: Mapping[str, np.ndarray] | None = None,
    **inputs,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    The gradients under test come from the float32 tape; the difference
    quotients are evaluated in float64 so that round-off in the oracle does
    not masquerade as gradient error. The error per coordinate is
    ``|a - n| / max(|a|, |n|, abs_floor)``. ``coords_per_param=None`` checks
    every coordinate. ``analytic`` overrides the gradients under test (used
    for negative controls).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if analytic is None:
        _, analytic = graph.value_and_grad(**inputs)
    rng = np.random.default_rng(seed)
    base = {k: v.astype(np.float64) for k, v in graph.parameters.items()}
    worst = (0.0, "", ())
    checked = 0
    for name, value in base.items():
        flat_idx = np.arange(value.size)
        if coords_per_param is not None and value.size > coords_per_param:
            flat_idx = rng.choice(value.size, coords_per_param, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), value.shape)
            params = dict(base)
            shifted = value.copy()
            shifted[idx] = value[idx] + eps
            params[name] = shifted
            f_plus = graph.evaluate64(params, **inputs)
            shifted = value.copy()
            shifted[idx] = value[idx] - eps
            params[name] = shifted
            f_minus = graph.evaluate64(params, **inputs)
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            checked += 1
            if err > worst[0] or not worst[1]:
                worst = (err, name, idx)
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), checked, tolerance)
