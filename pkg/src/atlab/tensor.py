"""Dense float64 tensors with reverse-mode differentiation.

Each differentiable op returns a new :class:`Tensor` that remembers its inputs
and a closure mapping the output gradient to one gradient per input. Calling
:meth:`Tensor.backward` on a scalar walks that record in reverse topological
order. Values are immutable (the underlying arrays are marked read-only); only
the ``grad`` slot changes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no recorded history and no gradient tracking."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    # -- backward ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tracked tensor t.

        Repeated calls accumulate into existing grad slots; reset with
        :meth:`zero_grad` first when that is not wanted.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # Grads of this pass are kept apart from the slots so that a second
        # backward over the same graph adds exactly one more copy.
        local: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = local.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                local[key] = pg if key not in local else local[key] + pg
        for node in order:
            g = local.get(id(node))
            if g is None:
                g = np.zeros_like(node.data)
            # slots are only ever rebound, never written in place, so sharing is safe
            node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    # subgradient 0 at 0
    return Tensor._result(out, (a,), lambda g: (g * (out > 0),), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return Tensor._result(np.maximum(a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


# -- reductions ----------------------------------------------------------
def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a: Tensor, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) over the last axis, shifted by the row max for stability."""
    m = a.data.max(axis=-1, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=-1, keepdims=True)
    out = m + np.log(s)
    soft = shifted / s
    if not keepdims:
        out = out[..., 0]

    def backward(g):
        if not keepdims:
            g = g[..., None]
        return (g * soft,)

    return Tensor._result(out, (a,), backward, "logsumexp")


def max_last(a: Tensor) -> Tensor:
    """Max over the last axis; ties send the gradient to the first maximiser."""
    idx = a.data.argmax(axis=-1)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return Tensor._result(out, (a,), backward, "max")


def take_last(a: Tensor, index) -> Tensor:
    """Row-wise index select: out[i] = a[i, index[i]]."""
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"take_last: tensor {a.shape} with index {index.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return Tensor._result(out, (a,), backward, "take")


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._result(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
        "matmul",
    )


def affine(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: x {x.shape}, W {w.shape}, b {b.shape} do not conform")
    return Tensor._result(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        ),
        "affine",
    )


# -- composites ----------------------------------------------------------
def log_softmax(logits: Tensor) -> Tensor:
    return sub(logits, logsumexp(logits, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[i, labels[i]]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"cross entropy expects [m, C] logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: {labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    bad = np.flatnonzero((labels < 0) | (labels >= logits.shape[1]))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {labels[i]} at row {i} outside [0, {logits.shape[1]})")
    picked = take_last(logits, labels)
    return mean(sub(logsumexp(logits), picked))


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    base = np.array(point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
