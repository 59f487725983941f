"""Deterministic numpy-backed tensors with tape-based reverse-mode autodiff.

Every tensor wraps a contiguous numpy array (float64 by default, float32 as
a storage option for inference and benchmarks).  Operations that touch a
tensor with ``requires_grad`` record a ``TapeNode`` holding the inputs and a
backward rule; ``Tensor.backward()`` linearizes the reachable graph into a
``Tape`` and replays it once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True
_NAN_DEBUG = False


class NumericInstabilityError(ArithmeticError):
    """A primitive produced a non-finite value (raised in nan-debug mode)."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval / benchmark mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def nan_debug():
    """Check every primitive output for non-finite values while active."""
    global _NAN_DEBUG
    prev = _NAN_DEBUG
    _NAN_DEBUG = True
    try:
        yield
    finally:
        _NAN_DEBUG = prev


class TapeNode:
    """One recorded primitive: its inputs and the rule mapping the output
    gradient to per-input gradients (``None`` for non-differentiable slots)."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[Array], Sequence[Array | None]]):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float array, optionally participating in the gradient tape.

    Invariants: ``data`` is contiguous and owns ``shape``; ``grad`` (once
    backward ran) has the identical shape; gradient accumulation across tape
    replays is additive.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays stay 0-d
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # ---- autodiff ------------------------------------------------------
    def backward(self, seed: Array | float | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable leaf.

        ``seed`` defaults to 1 and must match this tensor's shape.
        """
        if seed is None:
            if self.data.size != 1:
                raise DimensionError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} != output shape {self.data.shape}")
        Tape(self).backprop(seed)

    # ---- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # ---- method sugar ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def flip(self, axis: int):
        return flip(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Tape:
    """Reverse-topological linearization of the graph reachable from a root.

    ``nodes`` lists tensors in an order where every input precedes its
    output; ``backprop`` walks it once, in reverse.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if id(inp) not in seen:
                        stack.append((inp, False))
        self.nodes = order  # topological: inputs before outputs
        self.root = root

    def backprop(self, seed: Array) -> None:
        grads: dict[int, Array] = {id(self.root): seed}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            input_grads = t.node.backward_fn(g)
            for inp, gi in zip(t.node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# primitive registration helpers
# ---------------------------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, data: Array, inputs: tuple[Tensor, ...],
            backward_fn: Callable[[Array], Sequence[Array | None]]) -> Tensor:
    if _NAN_DEBUG and not np.all(np.isfinite(data)):
        raise NumericInstabilityError(f"non-finite output in op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data
    return _record("add", data, (a, b), lambda g: (
        _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data - b.data
    return _record("sub", data, (a, b), lambda g: (
        _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data
    return _record("mul", data, (a, b), lambda g: (
        _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data / b.data
    return _record("div", data, (a, b), lambda g: (
        _sum_to_shape(g / b.data, a.shape),
        _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p
    return _record("pow", data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _record("exp", data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _record("sum", data, (a,), lambda g: (
        _expand_reduced(g, a.shape, axis, keepdims).astype(a.data.dtype, copy=False),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return _record("mean", data, (a,), lambda g: (
        _expand_reduced(g, a.shape, axis, keepdims) / float(denom),))


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient flows to the first argmax position."""
    a = _as_tensor(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        if axis is None:
            mask = np.zeros_like(a.data)
            mask.reshape(-1)[int(np.argmax(a.data))] = 1.0
            return (mask * g,)
        idx = np.argmax(a.data, axis=axis)
        mask = np.zeros_like(a.data)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask * gg,)

    return _record("max", data, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _record("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _record("transpose", data, (a,), lambda g: (g.transpose(inv),))


def flip(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(np.flip(a.data, axis))
    return _record("flip", data, (a,), lambda g: (np.flip(g, axis),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: Array):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", data, tuple(ts), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _record("broadcast_to", data, (a,), lambda g: (_sum_to_shape(g, a.shape),))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data[idx])

    def backward(g: Array):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("getitem", data, (a,), backward)


def take_rows(a, rows: Array) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (rows may repeat)."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    data = a.data[rows]

    def backward(g: Array):
        out = np.zeros_like(a.data)
        np.add.at(out, rows, g)
        return (out,)

    return _record("take_rows", data, (a,), backward)


def index_add(base, rows: Array, values) -> Tensor:
    """Return ``base`` with ``values`` added at the given axis-0 rows."""
    base = _as_tensor(base)
    values = _as_tensor(values, like=base)
    rows = np.asarray(rows, dtype=np.intp)
    data = base.data.copy()
    np.add.at(data, rows, values.data)
    return _record("index_add", data, (base, values),
                   lambda g: (g, np.ascontiguousarray(g[rows])))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics over the last two axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axes disagree: {a.shape[-1]} (last axis of a) vs "
            f"{b.shape[-2]} (second-to-last of b)")
    data = a.data @ b.data

    def backward(g: Array):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

    return _record("matmul", data, (a, b), backward)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0,
          dtype=np.float64, requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)
