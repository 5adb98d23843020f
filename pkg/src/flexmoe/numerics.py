"""Dense f64 tensors with a tape-based reverse-mode autodiff.

Ops are recorded only while a :class:`Tape` is active and at least one input
requires a gradient; outside a tape everything runs as plain numpy. A tape is
consumed by :func:`backward`; calling it twice raises ``LifecycleError``
(double backward is unsupported).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from flexmoe.errors import (
    ConfigError,
    DimensionError,
    InputError,
    LifecycleError,
    NumericError,
)

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered record of ops; inputs of every node precede it by construction."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, name, out, inputs, backward_fn) -> None:
        if self.consumed:
            raise LifecycleError("tape already consumed by backward()")
        out._tape = self
        out._is_leaf = False
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(inputs), backward_fn, name))


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a sum is NaN/Inf whenever any element is; only rescan on a hit (overflowing sums)
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite output in op '{op}'")
    return arr


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(data, name)
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out._is_leaf = True
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from e

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from e

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from e

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make("log", y, (x,), lambda g: (g / x.data,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows and keeps relative precision for z << 0
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def _sigmoid_fast(z: np.ndarray) -> np.ndarray:
    # tanh form: no division, loses relative precision only where sigmoid(z) < ~1e-16
    out = np.tanh(0.5 * z)
    out += 1.0
    out *= 0.5
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def activation(kind: str, x) -> Tensor:
    """Elementwise nonlinearity. ``gelu`` is the tanh approximation."""
    x = as_tensor(x)
    z = x.data
    if kind == "sigmoid":
        y = _sigmoid(z)
        deriv = lambda: y * (1.0 - y)  # noqa: E731
    elif kind == "relu":
        y = np.maximum(z, 0.0)
        deriv = lambda: (z > 0).astype(DTYPE)  # noqa: E731
    elif kind == "tanh":
        y = np.tanh(z)
        deriv = lambda: 1.0 - y * y  # noqa: E731
    elif kind == "silu":
        s = _sigmoid_fast(z)
        y = z * s
        deriv = lambda: s * (1.0 + z * (1.0 - s))  # noqa: E731
    elif kind == "gelu":
        t = np.tanh(_GELU_C * (z + 0.044715 * z**3))
        y = 0.5 * z * (1.0 + t)
        deriv = lambda: 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)  # noqa: E731
    else:
        raise ConfigError(f"unknown activation kind {kind!r}")
    return _make(kind, y, (x,), lambda g: (g * deriv(),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including broadcast over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(y), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError("stack: shapes differ") from e

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make("stack", y, ts, bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError("concat: shapes differ off the joined axis") from e
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", y, ts, bw)


def narrow(x, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise DimensionError(f"narrow [{start}, {stop}) outside axis of length {x.shape[ax]}")
    sl = (slice(None),) * ax + (slice(start, stop),)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[sl] = g
        return (gx,)

    return _make("narrow", x.data[sl], (x,), bw)


def embedding(table, ids) -> Tensor:
    """Row gather ``table[ids]``; ids is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"embedding index out of range [0, {table.shape[0]})")
    y = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", y, (table,), bw)


# ---------------------------------------------------------------- normalisation


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    y = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(y, out=y)
    y *= 1.0 / np.sum(y, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def layer_norm(x, weight, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with a learned gain and no bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * weight.data

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            n = x.shape[-1]
            gx = rstd * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n
            )
        return gx, gw

    return _make("layer_norm", y, (x, weight), bw)


def cross_entropy(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean NLL over positions whose target is not ``ignore_index``.

    ``logits`` is ``[..., V]``; ``targets`` has the leading shape of logits.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = targets.reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    keep = tgt != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise InputError("cross_entropy: every position is ignored (degenerate batch)")
    if ((tgt[keep] < 0) | (tgt[keep] >= V)).any():
        raise InputError("cross_entropy: target id outside [0, V)")
    rows = np.nonzero(keep)[0]
    cols = tgt[keep]
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[rows, cols].sum() / n

    def bw(g):
        p = np.exp(logp)
        grad = np.zeros_like(flat)
        grad[rows] = p[rows]
        grad[rows, cols] -= 1.0
        return ((g / n) * grad.reshape(logits.shape),)

    return _make("cross_entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf recorded on ``loss``'s tape.

    Leaves that took part in the tape but are not reachable from ``loss`` get
    a zero gradient.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise LifecycleError("loss was not produced on a live tape")
    if tape.consumed:
        raise LifecycleError("backward() already ran on this tape; re-run the forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            for t in node.inputs:
                if t._is_leaf and t.requires_grad:
                    leaves.setdefault(id(t), t)
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t._is_leaf:
                leaves.setdefault(id(t), t)
            if gi is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            leaf.grad = np.zeros_like(leaf.data)
        else:
            leaf.grad = _finite(np.array(g, dtype=DTYPE).reshape(leaf.shape), "backward")


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step. Parameter arrays are replaced, never mutated."""
    if state.t < 0:
        raise ValueError("negative Adam step counter")
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for {name!r}")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p = params[name]
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.t = t


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
