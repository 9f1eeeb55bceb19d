"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous numpy array (row-major, so the storage is
the flat buffer the rest of the package assumes) together with an optional
gradient buffer of the same shape.  Operations build a per-result tape:
each derived tensor keeps its input tensors and a closure that scatters the
output gradient back onto them.  ``Tensor.backward`` walks that tape once,
in reverse topological order; a second walk of the same tape raises, and
gradients of gradients are not representable (grads are plain arrays).

All arithmetic broadcasts like numpy; gradients of broadcast operands are
summed back to the operand shape.  Reductions that pick an element (max
style ops) route the gradient to the first maximum in flat row-major
order, so repeated runs are bit-identical.

The default element type is 64-bit; ``set_default_dtype`` switches new
tensors to 32-bit when training speed matters.  Gradient checking is only
meaningful in 64-bit.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "set_default_dtype",
    "get_default_dtype",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "full",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "atan",
    "relu",
    "sigmoid",
    "silu",
    "maximum",
    "minimum",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "permute",
    "concat",
    "slice_axis",
    "take_rows",
    "mul_broadcast",
    "bce_with_logits",
    "assert_finite",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class NonFiniteError(ArithmeticError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the element type (np.float32 or np.float64) for new tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.size == 0:
            raise ShapeError(f"tensors must have positive extents, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A grad-less leaf viewing the same values."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Only defined for scalar (single-element) results.  The tape is
        consumed: a second backward through it raises, and building
        higher-order graphs is unsupported by construction.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._grad_fn is None and not self.requires_grad:
            raise RuntimeError("tensor is not part of a recorded graph")
        order = self._toposort()
        for node in order:
            # leaves are never marked, so parameters stay reusable across steps
            if node._consumed:
                raise RuntimeError(
                    "graph overlaps a tape that was already differentiated; double backward is unsupported"
                )
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None:
                node._consumed = True
                node._grad_fn(node.grad)
                node._grad_fn = None
                node._parents = ()

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, Iterable[Tensor]]] = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        return order

    # -- operator sugar -----------------------------------------------------

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

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        _accumulate(a, -g)

    return _record(-a.data, (a,), grad_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def grad_fn(g):
        _accumulate(a, g * out)

    return _record(out, (a,), grad_fn)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        _accumulate(a, g / a.data)

    return _record(np.log(a.data), (a,), grad_fn)


def atan(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        _accumulate(a, g / (1.0 + a.data * a.data))

    return _record(np.arctan(a.data), (a,), grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        _accumulate(a, g * (a.data > 0))

    return _record(out, (a,), grad_fn)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # branch on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_values(a.data)

    def grad_fn(g):
        _accumulate(a, g * out * (1.0 - out))

    return _record(out, (a,), grad_fn)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = _sigmoid_values(a.data)
    out = a.data * s

    def grad_fn(g):
        _accumulate(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _record(out, (a,), grad_fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _record(out, (a, b), grad_fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _record(out, (a, b), grad_fn)


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Multiply a [B,C,H,W] map by a [B,C,1,1] or [B,1,H,W] gate.

    This is plain broadcast multiplication with the shape pairing checked
    up front, since attention application is the one place it is allowed.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"mul_broadcast needs 4-d operands, got {a.shape} and {b.shape}")
    B, C, H, W = a.shape
    if b.shape not in ((B, C, 1, 1), (B, 1, H, W), (B, C, H, W)):
        raise ShapeError(
            f"gate shape {b.shape} does not broadcast over feature map shape {a.shape}"
        )
    return mul(a, b)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), grad_fn)


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g.reshape(()), a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _record(out, (a,), grad_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape surgery ---------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    orig = a.data.shape

    def grad_fn(g):
        _accumulate(a, g.reshape(orig))

    return _record(np.ascontiguousarray(a.data.reshape(shape)), (a,), grad_fn)


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    ref = list(parts[0].shape)
    ref[axis] = -1
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) == len(ref):
            other[axis] = -1
        if other != ref:
            raise ShapeError(
                f"concat shapes differ off axis {axis}: {[q.shape for q in parts]}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def grad_fn(g):
        index = [slice(None)] * g.ndim
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            index[axis] = slice(start, stop)
            _accumulate(p, np.ascontiguousarray(g[tuple(index)]))

    return _record(out, tuple(parts), grad_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; the gradient zero-pads back."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        _accumulate(a, buf)

    return _record(np.ascontiguousarray(a.data[index]), (a,), grad_fn)


def take_rows(a, idx) -> Tensor:
    """Gather rows of a 2-d tensor; duplicate indices sum on backward."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows needs a 1-d index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _record(a.data[idx].copy(), (a,), grad_fn)


# -- losses ----------------------------------------------------------------


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross entropy on raw logits, overflow-safe."""
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"logit shape {logits.shape} != target shape {targets.shape}")
    x, t = logits.data, targets.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        _accumulate(logits, g * (_sigmoid_values(x) - t))
        _accumulate(targets, g * -x)

    return _record(out, (logits, targets), grad_fn)


# -- diagnostics -----------------------------------------------------------


def assert_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Raise NonFiniteError if any element is NaN or Inf; returns the input."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise NonFiniteError(
            f"{name} contains non-finite values (first at flat index {bad} of shape {data.shape})"
        )
    return t
