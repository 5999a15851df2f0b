"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable op records its parents and a
closure that pushes the output gradient back into them. Graphs are built fresh
on every forward pass and released by :func:`backward`.

Broadcasting is deliberately narrow: a binary op accepts two tensors of equal
shape, or a second operand whose shape is a suffix of the first (a bias
broadcast over leading batch dimensions). Anything else needs an explicit
reshape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# Log-space stand-in for -inf; survives additions and logsumexp without NaNs.
NEG_INF = -1e9

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A node in a computation graph.

    Attributes:
        data: the forward value, an ``np.ndarray``.
        grad: accumulated gradient of the same shape, allocated lazily.
        requires_grad: whether gradients flow into this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap ``data`` as the output of a custom op.

        ``backward`` receives the output gradient and must call
        :meth:`accumulate` on whichever parents need a gradient.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        live = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(live) and is_grad_enabled()
        if out.requires_grad:
            out._parents = live
            out._backward = backward
        return out

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- numpy-ish surface ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


# -- broadcasting -------------------------------------------------------------
def _check_suffix(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible "
                     "(second operand must match or be a trailing suffix)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    if g.shape != shape:  # scalar operand
        g = g.sum().reshape(shape)
    return g


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.ndim < b.ndim:
        return b, a, True
    return a, b, False


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    _check_suffix(a.data, b.data, "add")

    def backward(g):
        a.accumulate(g)
        b.accumulate(_reduce_to(g, b.shape))

    return Tensor.from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.ndim >= b.ndim:
        _check_suffix(a.data, b.data, "sub")
    else:
        _check_suffix(b.data, a.data, "sub")

    def backward(g):
        a.accumulate(_reduce_to(g, a.shape))
        b.accumulate(-_reduce_to(g, b.shape))

    return Tensor.from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b, _ = _binary_operands(a, b)
    _check_suffix(a.data, b.data, "mul")

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(_reduce_to(g * a.data, b.shape))

    return Tensor.from_op(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * c)

    return Tensor.from_op(a.data * a.data.dtype.type(c), (a,), backward)


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data + a.data.dtype.type(c), (a,), a.accumulate)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - out * out))

    return Tensor.from_op(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)

    def backward(g):
        a.accumulate(g * mask)

    return Tensor.from_op(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        a.accumulate(g * out)

    return Tensor.from_op(out, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    a = as_tensor(a)
    mask = np.broadcast_to(mask, a.shape)
    out = np.where(mask, a.dtype.type(value), a.data)

    def backward(g):
        a.accumulate(np.where(mask, 0, g).astype(g.dtype))

    return Tensor.from_op(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)

    def backward(g):
        a.accumulate(g * keep)

    return Tensor.from_op(a.data * keep, (a,), backward)


# -- reductions ---------------------------------------------------------------
def sum_(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return Tensor.from_op(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable ``log(sum(exp(a)))`` along ``axis``."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("logsumexp over an empty slice")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def backward(g):
        a.accumulate(np.expand_dims(g, axis) * (e / s))

    return Tensor.from_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        a.accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor.from_op(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor.from_op(out, (a,), backward)


def masked_log_softmax(a: Tensor, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Log-softmax over the entries where ``allowed`` is true.

    Disallowed entries come out as ``NEG_INF``; a slice with no allowed entry is
    all ``NEG_INF`` and receives no gradient.
    """
    a = as_tensor(a)
    allowed = np.broadcast_to(allowed, a.shape)
    x = np.where(allowed, a.data, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.where(allowed, np.exp(x - m), 0)
    s = e.sum(axis=axis, keepdims=True)
    has = s > 0
    lse = np.log(np.where(has, s, 1)) + m
    out = np.where(allowed, a.data - lse, NEG_INF).astype(a.dtype)
    p = e / np.where(has, s, 1)

    def backward(g):
        g = np.where(allowed, g, 0)
        a.accumulate((g - p * g.sum(axis=axis, keepdims=True)).astype(a.dtype))

    return Tensor.from_op(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gamma.accumulate(_reduce_to(g * xhat, gamma.shape))
        beta.accumulate(_reduce_to(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            x.accumulate(gx)

    return Tensor.from_op(out, (x, gamma, beta), backward)


# -- linear algebra and shape ops --------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor.from_op(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        a.accumulate(g.reshape(src))

    return Tensor.from_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inv))

    return Tensor.from_op(np.transpose(a.data, axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return Tensor.from_op(out, tensors, backward)


def slice_(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return Tensor.from_op(np.array(out, copy=True), (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table.accumulate(full)

    return Tensor.from_op(out, (table,), backward)


def take_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """``out[..., i] = a[..., ids[..., i]]``, i.e. ``take_along_axis`` on the last axis."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    out = np.take_along_axis(a.data, ids, axis=-1)

    def backward(g):
        full = np.zeros_like(a.data)
        lead = np.indices(ids.shape)[:-1]
        np.add.at(full, (*lead, ids), g)
        a.accumulate(full)

    return Tensor.from_op(out, (a,), backward)


# -- backprop -----------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``.

    Gradients add onto whatever is already stored, so two calls without
    zeroing sum their contributions. Intermediate gradients and the graph
    itself are released unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss.accumulate(seed)
        return
    order = _topo(loss)
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        n.grad = None
        if not retain_graph:
            n._parents = ()
            n._backward = None


# -- gradient checking --------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the largest numeric gradient magnitude."""
    scale_ = max(float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale_


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-3) -> float:
    """Worst relative error between reverse-mode and finite-difference gradients."""
    inputs = list(inputs)
    for x in inputs:
        x.zero_grad()
    backward(fn())
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, x, h)))
    return worst
