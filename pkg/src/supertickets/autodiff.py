"""Dense-tensor arithmetic with a reverse-mode tape.

A :class:`Tape` records every operation whose inputs include a tape variable.
Tensors built from plain arrays (or produced by ops on such tensors) are
constants: no node is recorded and no gradient flows to them, so evaluation
without a tape costs nothing beyond the numpy calls.

    tape = Tape()
    w = tape.variable(np.ones((3, 2)))
    y = matmul(Tensor(x), w)
    grads = backward(sum_(y))
    grads.of(w)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class InputError(ValueError):
    pass


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]  # tape indices, -1 for constants
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, dtype=None) -> "Tensor":
        arr = np.array(value, dtype=dtype if dtype is not None else _dtype_of(value))
        _check_finite("variable", arr)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)


def _dtype_of(value):
    if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64):
        return value.dtype
    return DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Tape | None = None, index: int = -1) -> None:
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like if like is not None else DEFAULT_DTYPE))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check_finite(op, out)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: inputs live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    idx = tuple(t.index if t.tape is not None else -1 for t in inputs)
    tape.nodes.append(_Node(op, idx, vjp, out.shape))
    return Tensor(out, tape, len(tape.nodes) - 1)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    av, bv = a.data, b.data
    out = av * bv
    return _record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _record("relu", (a,), np.where(keep, a.data, 0).astype(a.dtype), lambda g: (g * keep,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    x2 = x * x
    inner = c * (x + k * x2 * x)
    t = np.tanh(inner)
    out = half * x * (1 + t)

    def vjp(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * dinner),)

    return _record("gelu", (a,), out, vjp)


def pointwise(a, kind: str, other=None) -> Tensor:
    """Dispatch by name: relu, gelu, add, mul, scale."""
    if kind == "relu":
        return relu(_as_tensor(a))
    if kind == "gelu":
        return gelu(_as_tensor(a))
    if kind == "add":
        return add(a, other)
    if kind == "mul":
        return mul(a, other)
    if kind == "scale":
        return scale(_as_tensor(a), other)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return _record("swap_last", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise InputError(f"index out of range for table with {rows} rows")

    def vjp(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record("gather", (table,), table.data[ids], vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    try:
        out = av @ bv
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible batch dims {av.shape}, {bv.shape}") from exc

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", (a, b), out, vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), s, vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    gv = gain.data
    out = xhat * gv + bias.data

    def vjp(g):
        dxhat = g * gv
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (a, gain, bias), out, vjp)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    z = logits.data
    labels = np.asarray(labels)
    b, c = z.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} logits rows but labels of shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"label out of range for {c} classes")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    per = -logp[np.arange(b), labels]
    denom = b if reduction == "mean" else 1
    out = np.asarray(per.sum() / denom, dtype=z.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1
        return (p * (g / denom),)

    return _record("cross_entropy", (logits,), out, vjp)


def mse(pred: Tensor, targets, reduction: str = "mean") -> Tensor:
    p = pred.data
    t = np.asarray(targets, dtype=p.dtype).reshape(p.shape[0], -1)
    if t.shape != p.shape:
        raise ShapeError(f"mse: predictions {p.shape} vs targets {t.shape}")
    r = p - t
    denom = p.size if reduction == "mean" else p.shape[1]
    out = np.asarray((r * r).sum() / denom, dtype=p.dtype)
    return _record("mse", (pred,), out, lambda g: (2 * r * (g / denom),))


def loss(logits: Tensor, targets, kind: str, reduction: str = "mean") -> Tensor:
    """Batch loss; ``reduction="sum"`` keeps per-example gradients separable."""
    if kind == "cross_entropy":
        return cross_entropy(logits, targets, reduction)
    if kind == "mse":
        return mse(logits, targets, reduction)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------- reverse pass


class Gradients(dict):
    """Map from tape index to gradient array."""

    def __init__(self, tape: Tape) -> None:
        super().__init__()
        self.tape = tape

    def of(self, t: Tensor) -> np.ndarray:
        if t.tape is not self.tape:
            raise ValueError("tensor is not on this tape")
        g = self.get(t.index)
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g


def backward(root: Tensor) -> Gradients:
    if root.tape is None:
        raise ValueError("backward: root does not depend on any tape variable")
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    nodes = root.tape.nodes
    grads = Gradients(root.tape)
    grads[root.index] = np.ones(root.shape, dtype=root.dtype)
    for i in range(root.index, -1, -1):
        g = grads.get(i)
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if j < 0 or gj is None:
                continue
            prev = grads.get(j)
            grads[j] = gj if prev is None else prev + gj
    return grads
