"""Tape-free reverse-mode differentiation over numpy arrays.

Only the primitives needed by the dynamics ensemble and SAC are provided:
affine maps, elementwise activations, reductions, and the handful of
elementwise functions that make up Gaussian log-likelihoods and the
diagonal W2 distance. Every op records its parents and a closure that maps
the output gradient to parent gradients; :meth:`Var.backward` walks the
graph in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..exceptions import NonFiniteError

_LOG2 = np.log(2.0)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Var, ...] = _parents if self.requires_grad else ()
        self._backward: Callable | None = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    """Wrap a value as a graph leaf that never receives gradients."""
    return Var(x.value if isinstance(x, Var) else x)


# binary ops ---------------------------------------------------------------
def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value, _parents=(a, b),
               _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.value - b.value, _parents=(a, b),
               _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv, _parents=(a, b),
               _backward=lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return Var(out, _parents=(a, b),
               _backward=lambda g: (_unbroadcast(g / bv, av.shape),
                                    _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Var(av @ bv, _parents=(a, b), _backward=back)


def minimum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    pick_a = av <= bv
    return Var(np.where(pick_a, av, bv), _parents=(a, b),
               _backward=lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                                    _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)))


def concat(vars_: Sequence, axis: int = -1) -> Var:
    vs = [as_var(v) for v in vars_]
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([v.value for v in vs], axis=axis), _parents=tuple(vs), _backward=back)


# unary ops ----------------------------------------------------------------
def getitem(a: Var, idx) -> Var:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], _parents=(a,), _backward=back)


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=back)


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return vsum(a, axis, keepdims) * (1.0 / n)


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return Var(out, _parents=(a,), _backward=lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return Var(np.log(av), _parents=(a,), _backward=lambda g: (g / av,))


def square(a: Var) -> Var:
    av = a.value
    return Var(av * av, _parents=(a,), _backward=lambda g: (2.0 * g * av,))


def sqrt(a: Var) -> Var:
    """Square root whose derivative at 0 is taken as 0 (the subgradient W2 needs)."""
    out = np.sqrt(a.value)
    safe = np.where(out > 0.0, out, 1.0)
    return Var(out, _parents=(a,), _backward=lambda g: (np.where(out > 0.0, 0.5 * g / safe, 0.0),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return Var(out, _parents=(a,), _backward=lambda g: (g * (1.0 - out * out),))


def relu(a: Var) -> Var:
    av = a.value
    return Var(np.maximum(av, 0.0), _parents=(a,), _backward=lambda g: (g * (av > 0.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(a: Var) -> Var:
    av = a.value
    sig = _sigmoid(av)
    return Var(av * sig, _parents=(a,), _backward=lambda g: (g * (sig + av * sig * (1.0 - sig)),))


def softplus(a: Var) -> Var:
    av = a.value
    out = np.logaddexp(0.0, av)
    return Var(out, _parents=(a,), _backward=lambda g: (g * _sigmoid(av),))


def log1m_tanh_sq(a: Var) -> Var:
    """log(1 - tanh(x)^2) in the cancellation-free form 2(log 2 - x - softplus(-2x))."""
    return 2.0 * (_LOG2 - a - softplus(-2.0 * a))


ACTIVATIONS = {"swish": swish, "relu": relu, "tanh": tanh}


def soft_clamp(x: Var, lo: float, hi: float) -> Var:
    """Smooth clamp strictly inside (lo, hi).

    hi - softplus(hi - x) bounds from above; the lower softplus is rescaled by
    (hi - lo) / softplus(hi - lo) so it cannot push the result back past hi.
    """
    x = hi - softplus(hi - x)
    return lo + softplus(x - lo) * clamp_scale(lo, hi)


def clamp_scale(lo: float, hi: float) -> float:
    return float((hi - lo) / np.logaddexp(0.0, hi - lo))


def grad_of(loss_fn: Callable[..., Var], leaves: Iterable[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn(*vars)`` and return (loss, gradients) for each leaf array."""
    vars_ = [Var(np.array(x, dtype=np.float64), requires_grad=True) for x in leaves]
    loss = loss_fn(*vars_)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {value!r}")
    loss.backward()
    return value, [np.zeros_like(v.value) if v.grad is None else v.grad for v in vars_]
