"""Small numeric core: array-valued reverse-mode autodiff, MLPs, Adam and
the binary checkpoint format.

Every value is a 2-D float64 array (rows are batch entries). Only the ops the
actor-critic loss needs are supported.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"MHA3C-CK"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("tanh", "relu", "identity")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# Per thread: A3C workers toggle recording concurrently.
_mode = threading.local()


def _grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    prev = _grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, parents: tuple = (), backward=None, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def Param(value, name: str = "") -> Tensor:
    t = Tensor(value, requires_grad=True, name=name)
    t.zero_grad()
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward, requires_grad=True)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def affine(x, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


def identity(a: Tensor) -> Tensor:
    return a


def square(a: Tensor) -> Tensor:
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with max shift."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _node(np.array([[a.value.sum()]]), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    out = a.value.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return mul(reduce_sum(a), 1.0 / a.value.size)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Column ``index[i]`` of row ``i`` as an (N, 1) tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.value)
        out[rows, index] = g[:, 0]
        return (out,)

    return _node(a.value[rows, index][:, None], (a,), back)


_ACT_FN = {"tanh": tanh, "relu": relu, "identity": identity}


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Leaves keep their gradients across calls (they add up) until zeroed.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- vectors


def softmax_stable(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise NumericError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


# ---------------------------------------------------------------- params


def init_params(shape: tuple[int, int], seed: int, *, zero: bool = False, scale: float = 1.0) -> Tensor:
    """Uniform in +-scale/sqrt(fan_in), fan_in being the row count."""
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"dimensions must be positive, got {shape}")
    if zero:
        return Param(np.zeros(shape))
    bound = scale / math.sqrt(rows)
    rng = np.random.default_rng(seed)
    return Param(rng.uniform(-bound, bound, size=shape))


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "tanh"


@dataclass
class MLPParams:
    layers: list[Layer]

    @classmethod
    def build(cls, sizes: Sequence[int], seed: int, hidden: str = "tanh", out: str = "identity",
              out_scale: float = 1.0) -> MLPParams:
        ss = np.random.SeedSequence(seed)
        seeds = ss.generate_state(len(sizes) - 1)
        layers = []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            w = init_params((i, o), int(seeds[k]), scale=out_scale if last else 1.0, zero=last and out_scale == 0.0)
            layers.append(Layer(w, init_params((1, o), 0, zero=True), out if last else hidden))
        return cls(layers)

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]


def mlp_forward(params: MLPParams, x) -> Tensor:
    x = as_tensor(x)
    if x.value.ndim == 1:
        x = Tensor(x.value[None, :]) if not x.requires_grad else x
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != layer input {params.in_dim}")
    for layer in params.layers:
        x = _ACT_FN[layer.activation](affine(x, layer.weight, layer.bias))
    return x


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> AdamState:
        params = list(params)
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params], **hyper)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm > 0:
        k = max_norm / norm
        for g in grads:
            g *= k
    return norm


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. Gradients are zeroed afterwards."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("parameter, gradient and moment counts differ")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.zero_grad()


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path: Path, manifest: dict, arrays: Sequence[np.ndarray]) -> None:
    """Magic, 8-byte manifest length, JSON manifest, then raw float64 LE data.

    ``manifest["arrays"]`` is filled with the shapes of ``arrays`` in order.
    """
    manifest = dict(manifest)
    manifest["format_version"] = CHECKPOINT_VERSION
    manifest["arrays"] = [list(a.shape) for a in arrays]
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path: Path) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + n])
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    off = 16 + n
    arrays = []
    for shape in manifest["arrays"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape))
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return manifest, arrays
