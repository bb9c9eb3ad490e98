"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Operations
build a dynamic graph of backward closures; ``Tensor.backward()`` walks it
in reverse topological order. Gradients accumulate additively, so reusing
one tensor in several places (weight sharing across time steps) sums the
contributions.

Only float32/float64 data is supported. Every operation checks its output
for NaN/Inf unless finite checking is disabled via ``finite_checks(False)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (evaluation mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-operation NaN/Inf output checks."""
    global _finite_checks
    prev, _finite_checks = _finite_checks, enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return arr


class Tensor:
    """Array value with an additively accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar (implemented via make_op below) -----------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, attaching the backward closure when grads are on."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Promote python scalars to the other operand's dtype (avoids numpy-2
    float64-scalar upcasting of float32 graphs)."""
    if isinstance(a, Tensor):
        return a, (b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype))
    return Tensor(a, dtype=b.dtype), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / structural ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return make_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return make_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return make_op(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(in_shape))

    return make_op(out, (x,), backward)


def flatten(x: Tensor, keep_first: bool = False) -> Tensor:
    """Row-major flatten; with keep_first, flatten all but the leading axis."""
    if keep_first:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.dtype)

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return make_op(np.asarray(out), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = x.data.mean(dtype=x.dtype)

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=False))

    return make_op(np.asarray(out), (x,), backward)


def frame(x: Tensor, t: int, seq_len: int) -> Tensor:
    """Select frame t from a (B*T, ...) tensor laid out batch-major.

    Backward scatters the gradient into the shared buffer without
    materializing per-frame copies of the full sequence gradient.
    """
    b = x.shape[0] // seq_len
    view = x.data.reshape(b, seq_len, *x.shape[1:])
    out = np.ascontiguousarray(view[:, t])

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad.reshape(b, seq_len, *x.shape[1:])[:, t] += g

    return make_op(out, (x,), backward)


def row(x: Tensor, t: int) -> Tensor:
    """Select x[t] along the leading axis; backward scatters in place."""
    out = x.data[t].copy()

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[t] += g

    return make_op(out, (x,), backward)


def mean_of(tensors: Iterable[Tensor]) -> Tensor:
    """Elementwise mean of same-shaped tensors (fusion over frames)."""
    ts = list(tensors)
    if not ts:
        raise ValueError("mean_of() needs at least one tensor")
    n = len(ts)
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    out /= n

    def backward(g):
        share = g / n
        for t in ts:
            if t.requires_grad:
                t.accumulate_grad(share)

    return make_op(out, tuple(ts), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0, *sizes])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return make_op(out, tuple(ts), backward)


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice the channel axis of (B,C,H,W) / (C,H,W); backward scatters."""
    axis = x.data.ndim - 3
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(lo, hi)
    out = np.ascontiguousarray(x.data[tuple(idx)])

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[tuple(idx)] += g

    return make_op(out, (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        slices = np.split(g, len(ts), axis=axis)
        for t, s in zip(ts, slices):
            if t.requires_grad:
                t.accumulate_grad(np.squeeze(s, axis=axis))

    return make_op(out, tuple(ts), backward)
