"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Only the primitives the denoiser, the guidance classifiers and the
forward-process maps need are provided: affine maps, elementwise arithmetic,
the gated unit ``x * sigmoid(x)``, log-softmax, reductions, slicing and
concatenation. Anything else applied to a :class:`Var` (in particular raw numpy
ufuncs) raises :class:`UnsupportedPrimitive` rather than silently detaching
the graph.

Values are float64 throughout.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class UnsupportedPrimitive(TypeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None

    # numpy interop: refuse silently-detaching ufuncs and array functions
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if ufunc is np.add and method == "__call__":
            return add(*inputs)
        if ufunc is np.subtract and method == "__call__":
            return sub(*inputs)
        if ufunc is np.multiply and method == "__call__":
            return mul(*inputs)
        if ufunc is np.matmul and method == "__call__":
            return matmul(*inputs)
        raise UnsupportedPrimitive(f"numpy ufunc {ufunc.__name__!r} is not a differentiable primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitive(f"numpy function {func.__name__!r} is not a differentiable primitive")

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedPrimitive("implicit conversion of Var to ndarray would detach the graph")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Var):
            raise UnsupportedPrimitive("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return vmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, seed=None) -> None:
        backward(self, seed)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def _node(value, parents, fn) -> Var:
    out = Var(value, parents)
    if out.requires_grad:
        out.backward_fn = fn
    else:
        out.parents = ()
    return out


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), fn)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), fn)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def fn(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), fn)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedPrimitive("matmul is only defined for 2-D operands")

    def fn(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.value @ b.value, (a, b), fn)


def affine(x, w, b) -> Var:
    """``x @ w + b`` as one node."""
    x, w, b = as_var(x), as_var(w), as_var(b)

    def fn(g):
        gx = g @ w.value.T if x.requires_grad else None
        gw = x.value.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(x.value @ w.value + b.value, (x, w, b), fn)


def silu(x) -> Var:
    x = as_var(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def fn(g):
        return (g * (sig * (1.0 + x.value * (1.0 - sig))),)

    return _node(x.value * sig, (x,), fn)


def log_softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def fn(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), fn)


def vsum(x, axis=None) -> Var:
    x = as_var(x)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(x.value.sum(axis=axis), (x,), fn)


def vmean(x, axis=None) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return vsum(x, axis) * (1.0 / n)


def reshape(x, shape) -> Var:
    x = as_var(x)

    def fn(g):
        return (g.reshape(x.shape),)

    return _node(x.value.reshape(shape), (x,), fn)


def getitem(x, idx) -> Var:
    x = as_var(x)

    def fn(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), fn)


def take_along_last(x, idx) -> Var:
    """``x[..., idx]`` picking one entry per leading position (log-likelihood of a target)."""
    x = as_var(x)
    idx = np.asarray(idx, dtype=np.int64)[..., None]

    def fn(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _node(np.take_along_axis(x.value, idx, axis=-1)[..., 0], (x,), fn)


def concat(xs: Iterable, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), xs, fn)


def clip(x, lo: float, hi: float) -> Var:
    x = as_var(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def fn(g):
        return (g * inside,)

    return _node(np.clip(x.value, lo, hi), (x,), fn)


def square(x) -> Var:
    return mul(x, x)


def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, seed=None) -> None:
    if seed is None:
        if root.value.size != 1:
            raise ValueError("backward() without a seed needs a scalar output")
        seed = np.ones_like(root.value)
    grads = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(f: Callable[[Var], Var], x) -> np.ndarray:
    """Exact gradient of a scalar-valued composition ``f`` at ``x``."""
    xv = Var(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(xv)
    if not isinstance(out, Var):
        raise UnsupportedPrimitive(f"composition returned {type(out).__name__}, not a Var")
    if out.value.size != 1:
        raise ValueError(f"composition must be scalar-valued, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros_like(xv.value)
    backward(out)
    return xv.grad if xv.grad is not None else np.zeros_like(xv.value)
