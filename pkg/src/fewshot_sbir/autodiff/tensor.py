"""Dense float64 tensors with a dynamic reverse-mode record.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
an input requires a gradient, the result keeps references to its inputs and a
vector-Jacobian product (VJP). VJPs are written with the same tensor ops, so a
backward pass executed while recording is itself differentiable.

Node ids come from a process-wide counter, so sorting the reachable nodes by id
gives a valid topological order (a node is always created after its inputs).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NumericDomainError(ArithmeticError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite output")


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag: bool) -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: ops inside do not record."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


VJP = Callable[["Tensor", "Tensor"], Sequence["Tensor | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericDomainError("tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: VJP | None = None
        self.op = "leaf"
        self.id = next(_ids)

    # -- introspection -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericDomainError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.id = next(_ids)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- shape plumbing ---------------------------------------------------------

def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the reverse of broadcasting)."""
    if x.shape == tuple(shape):
        return x
    data = x.data
    lead = data.ndim - len(shape)
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    src = x.shape
    return _node("sum_to", data.reshape(shape), (x,), lambda g, out: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if x.shape == tuple(shape):
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, tuple(shape)) from None
    src = x.shape
    return _node("broadcast_to", data, (x,), lambda g, out: (sum_to(g, src),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _node("reshape", data, (x,), lambda g, out: (reshape(g, src),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _node("transpose", x.data.T.copy(), (x,), lambda g, out: (transpose(g),))


def getitem(x: Tensor, key) -> Tensor:
    src = x.shape
    data = np.array(x.data[key], dtype=np.float64)
    return _node("getitem", data, (x,), lambda g, out: (scatter(g, src, key),))


def scatter(x: Tensor, shape: tuple[int, ...], key) -> Tensor:
    """Zeros of ``shape`` with ``x`` accumulated at ``key``; adjoint of getitem."""
    data = np.zeros(shape)
    np.add.at(data, key, x.data)
    return _node("scatter", data, (x,), lambda g, out: (getitem(g, key),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g, out):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = (slice(None),) * ax + (slice(int(lo), int(hi)),)
            grads.append(getitem(g, key))
        return grads

    return _node("concat", data, tuple(xs), vjp)


# -- arithmetic --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b), lambda g, out: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _node("subtract", a.data - b.data, (a, b),
                 lambda g, out: (sum_to(g, sa), neg(sum_to(g, sb))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _node("multiply", a.data * b.data, (a, b),
                 lambda g, out: (sum_to(g * b, a.shape), sum_to(g * a, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0):
        raise NumericDomainError("divide")
    return _node("divide", a.data / b.data, (a, b),
                 lambda g, out: (sum_to(g / b, a.shape), sum_to(neg(g * out / b), b.shape)))


def neg(x: Tensor) -> Tensor:
    return _node("negate", -x.data, (x,), lambda g, out: (neg(g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node("matmul", a.data @ b.data, (a, b),
                 lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# -- reductions --------------------------------------------------------------

def _keep_shape(shape: tuple[int, ...], axis) -> tuple[int, ...]:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    kshape = _keep_shape(src, axis)
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    return _node("sum", data, (x,), lambda g, out: (broadcast_to(reshape(g, kshape), src),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if n == 0:
        raise ShapeError("mean", x.shape)
    return tsum(x, axis, keepdims) * (1.0 / n)


def tmax(x: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Max over one axis. Ties route the gradient to the first maximiser."""
    if x.shape[axis] == 0:
        raise ShapeError("max", x.shape)
    idx = np.argmax(x.data, axis=axis)
    mask = np.zeros_like(x.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    data = np.asarray(x.data.max(axis=axis, keepdims=keepdims), dtype=np.float64)
    kshape = _keep_shape(x.shape, axis)
    src = x.shape
    return _node("max", data, (x,),
                 lambda g, out: (broadcast_to(reshape(g, kshape), src) * mask,))


# -- elementwise nonlinearities ---------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _node("relu", x.data * mask, (x,), lambda g, out: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    return _node("sigmoid", _sigmoid(x.data), (x,), lambda g, out: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    return _node("tanh", np.tanh(x.data), (x,), lambda g, out: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _node("exp", data, (x,), lambda g, out: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericDomainError("log")
    return _node("log", np.log(x.data), (x,), lambda g, out: (g / x,))


def reciprocal0(x: Tensor) -> Tensor:
    """1/x with the convention 1/0 := 0 (used for sub-gradients at 0)."""
    nz = x.data != 0
    data = np.divide(1.0, x.data, out=np.zeros_like(x.data), where=nz)
    return _node("reciprocal0", data, (x,), lambda g, out: (neg(g * out * out),))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at 0 is taken as 0."""
    if np.any(x.data < 0):
        raise NumericDomainError("sqrt")
    return _node("sqrt", np.sqrt(x.data), (x,), lambda g, out: (g * reciprocal0(out) * 0.5,))


def softplus(x: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softplus ``tau * log(1 + exp(x / tau))``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = x.data / tau
    # log1p(exp(-|u|)) underflows harmlessly to 0 for |u| > ~745
    data = tau * (np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u))))
    return _node("softplus", data, (x,), lambda g, out: (g * sigmoid(x * (1.0 / tau)),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)
    return _node("clip", np.clip(x.data, lo, hi), (x,), lambda g, out: (g * inside,))


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by ``-lam``."""
    return _node("grl", x.data.copy(), (x,), lambda g, out: (g * (-lam),))
