"""Minimal reverse-mode automatic differentiation on numpy arrays.

A `Tensor` wraps an ndarray and records the operations applied to it on a
tape (the graph of parent tensors plus a vector-Jacobian closure per node).
Calling `backward()` on a scalar output accumulates gradients into the
`.grad` field of every tensor with `requires_grad=True`.

Only the primitives needed by this package are implemented. All ops keep
the dtype of their inputs, so the same code runs in float32 for training
and float64 for finite-difference verification.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "add", "sub", "mul", "div", "neg", "pow_const",
    "matmul", "exp", "log", "sqrt", "tanh", "sigmoid", "erf", "relu",
    "reshape", "transpose", "getitem", "concat", "stack",
    "tsum", "tmean", "tmax_const",
    "softmax", "log_softmax", "logsumexp", "l2_normalize",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; results are constants."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None  # callable(grad_out) -> tuple of parent grads (or None)
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph construction --------------------------------------------------
    @staticmethod
    def _make(data, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track)
        if track:
            out._parents = parents
            out._vjp = vjp
        return out

    # -- backward pass -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Accumulate gradients of `self` w.r.t. all upstream tensors."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------------
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

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ----------------------------------------------------------------
# Python scalars get a fast path that leaves the array dtype alone (a wrapped
# scalar would be a float64 array and silently promote float32 activations).

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def _pyscalar(x) -> float:
    # numpy scalars are strong-typed under NEP 50 and would promote float32
    # arrays; plain Python floats stay weak
    return float(x)


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a, s = as_tensor(a), _pyscalar(b)
        return Tensor._make(a.data + s, (a,), lambda g: (g,))
    if _is_scalar(a):
        b, s = as_tensor(b), _pyscalar(a)
        return Tensor._make(b.data + s, (b,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a, s = as_tensor(a), _pyscalar(b)
        return Tensor._make(a.data - s, (a,), lambda g: (g,))
    if _is_scalar(a):
        b, s = as_tensor(b), _pyscalar(a)
        return Tensor._make(s - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a, s = as_tensor(a), _pyscalar(b)
        return Tensor._make(a.data * s, (a,), lambda g: (g * s,))
    if _is_scalar(a):
        b, s = as_tensor(b), _pyscalar(a)
        return Tensor._make(b.data * s, (b,), lambda g: (g * s,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        a, s = as_tensor(a), _pyscalar(b)
        return Tensor._make(a.data / s, (a,), lambda g: (g / s,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return Tensor._make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._make(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Batched matrix product; operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._make(out, (a, b), vjp)


# -- elementwise nonlinearities --------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def erf(a) -> Tensor:
    a = as_tensor(a)
    out = _erf(a.data)
    coef = 2.0 / np.sqrt(np.pi)

    def vjp(g):
        return (g * coef * np.exp(-a.data * a.data),)

    return Tensor._make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


# -- shape manipulation ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    """Indexing by slices, ints, or an integer array (embedding lookup)."""
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._make(out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(ts), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(ts)))

    return Tensor._make(out, tuple(ts), vjp)


# -- reductions -------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        g2 = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g2, shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % len(shape) for ax in axes):
                g2 = np.expand_dims(g2, ax)
        return (np.broadcast_to(g2, shape).copy(),)

    return Tensor._make(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax_const(a, axis=None, keepdims: bool = False) -> np.ndarray:
    """Detached max, used to stabilize softmax/logsumexp (constant a.e.)."""
    a = as_tensor(a)
    return a.data.max(axis=axis, keepdims=keepdims)


# -- composites --------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = tmax_const(a, axis=axis, keepdims=True)
    e = exp(sub(a, m))
    return div(e, tsum(e, axis=axis, keepdims=True))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = tmax_const(a, axis=axis, keepdims=True)
    s = log(tsum(exp(sub(a, m)), axis=axis, keepdims=True))
    out = add(s, m)
    if not keepdims:
        reduced = list(out.data.shape)
        del reduced[axis % len(reduced)]
        out = reshape(out, tuple(reduced))
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    n = sqrt(add(tsum(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, n)
