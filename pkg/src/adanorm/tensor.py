"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable op creates a node carrying a monotonically increasing
sequence number, so sorting the reachable nodes by that number recovers the
order in which they were recorded.  ``backward`` walks that order in reverse,
visiting each node exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "NonFiniteError",
    "DimensionError",
    "as_tensor",
    "matmul",
    "ew",
    "reduce_mean",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "sigmoid",
    "relu",
    "tanh",
    "sqrt",
    "log_softmax",
    "guard_nonzero",
    "unfold_time",
    "concat",
]

_sequence = itertools.count()
_grad_enabled = True

SQRT_GRAD_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible operand shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite value produced by {op!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 100.0

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
        _copy: bool = True,
    ):
        self.data = np.array(data, dtype=np.float64, copy=True if _copy else None)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_sequence)

    # -- basic properties -------------------------------------------------

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
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return ew("add", self, other)

    def __radd__(self, other):
        return ew("add", as_tensor(other), self)

    def __sub__(self, other):
        return ew("sub", self, other)

    def __rsub__(self, other):
        return ew("sub", as_tensor(other), self)

    def __mul__(self, other):
        return ew("mul", self, other)

    def __rmul__(self, other):
        return ew("mul", as_tensor(other), self)

    def __truediv__(self, other):
        return ew("div", self, other)

    def __rtruediv__(self, other):
        return ew("div", as_tensor(other), self)

    def __neg__(self):
        return ew("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


class Parameter(Tensor):
    """A trainable leaf tensor tagged with its learning-rate group."""

    def __init__(self, data, group: str = "net", name: str = ""):
        super().__init__(data, requires_grad=True)
        self.group = group
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, group={self.group!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap an op result, recording it on the tape when any parent needs grads."""
    _check_finite(data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op, _copy=False)
    parents = tuple(parents)
    out = Tensor(data, requires_grad=True, _parents=parents, op=op, _copy=False)

    def _backward(grad: np.ndarray) -> None:
        for parent, g in zip(parents, backward_fn(grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g

    out._backward = _backward
    return out


# -- elementwise ----------------------------------------------------------

_UNARY = {"sqrt", "sigmoid", "relu", "tanh"}
_BINARY = {"add", "sub", "mul", "div"}


def ew(op: str, a, b=None) -> Tensor:
    """Elementwise op.  Binary kinds broadcast numpy-style; ``b`` may be a scalar."""
    if op in _UNARY:
        return {"sqrt": sqrt, "sigmoid": sigmoid, "relu": relu, "tanh": tanh}[op](a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    x, y = a.data, b.data

    if op == "add":
        data = x + y
        fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif op == "sub":
        data = x - y
        fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif op == "mul":
        data = x * y
        fn = lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape))
    else:
        if np.any(y == 0.0):
            raise ZeroDivisionError("div: zero in denominator")
        data = x / y
        fn = lambda g: (
            _unbroadcast(g / y, a.shape),
            _unbroadcast(-g * x / (y * y), b.shape),
        )
    assert data.shape == out_shape
    return _make(data, (a, b), fn, op)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = x**exponent
    return _make(data, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative operand")
    root = np.sqrt(a.data)
    return _make(root, (a,), lambda g: (0.5 * g / np.maximum(root, SQRT_GRAD_FLOOR),), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def guard_nonzero(a, eps: float) -> Tensor:
    """Replace entries with ``|v| < eps`` by ``sign(v) * eps`` (sign(0) = +1).

    Clamped entries are constants, so their gradient is zero.
    """
    a = as_tensor(a)
    small = np.abs(a.data) < eps
    data = np.where(small, np.where(a.data < 0, -eps, eps), a.data)
    keep = ~small
    return _make(data, (a,), lambda g: (g * keep,), "guard")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics (1-D operands promoted)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul: scalar operand")
    x = a.data[None, :] if a.ndim == 1 else a.data
    y = b.data[:, None] if b.ndim == 1 else b.data
    if x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    full = x @ y
    data = full
    if a.ndim == 1:
        data = data[..., 0, :]
    if b.ndim == 1:
        data = data[..., 0]

    def fn(g):
        g = g.reshape(full.shape)
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return (
            _unbroadcast(gx, x.shape).reshape(a.shape),
            _unbroadcast(gy, y.shape).reshape(b.shape),
        )

    return _make(data, (a, b), fn, "matmul")


# -- reductions and shape ops ---------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(data, (a,), fn, "sum")


def reduce_mean(a, axis=-2, keepdims: bool = False) -> Tensor:
    """Arithmetic mean; the default axis is the time axis of an ``L x d`` window."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("reduce_mean: empty axis")
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(data, (a,), fn, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(data, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    data = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)

    def fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(data), (a,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: np.split(g, bounds, axis=axis), "concat")


def unfold_time(a, kernel: int) -> Tensor:
    """Sliding windows along the time axis.

    ``(B, L, C) -> (B, L - kernel + 1, kernel * C)``, where the last axis is
    ordered (offset, channel).  Turns a valid 1-D convolution into a matmul.
    """
    a = as_tensor(a)
    if a.ndim != 3:
        raise DimensionError("unfold_time expects (batch, time, channels)")
    batch, length, channels = a.shape
    if length < kernel:
        raise DimensionError(f"unfold_time: length {length} < kernel {kernel}")
    out_len = length - kernel + 1
    cols = np.stack([a.data[:, k : k + out_len, :] for k in range(kernel)], axis=2)
    data = cols.reshape(batch, out_len, kernel * channels)

    def fn(g):
        g = g.reshape(batch, out_len, kernel, channels)
        full = np.zeros_like(a.data)
        for k in range(kernel):
            full[:, k : k + out_len, :] += g[:, :, k, :]
        return (full,)

    return _make(data, (a,), fn, "unfold")


# -- reverse pass ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients of every reachable leaf are reset before accumulation, so after
    the call each leaf's ``grad`` is exactly d(loss)/d(leaf).
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss was not recorded on a tape (no forward with grads)")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data)
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    ordered = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    for node in ordered:
        if node.is_leaf:
            node.grad = np.zeros_like(node.data)
        else:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in ordered:
        if node.is_leaf or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None
