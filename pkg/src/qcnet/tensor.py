"""Minimal N-D tensor with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 by default, float64 for gradient
checking) plus an optional gradient buffer. Layer functions in :mod:`ops`
build a tape of parent links and backward closures; calling ``backward()``
on a scalar loss walks the tape in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype.name}, grad={self.grad is not None})"

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            check_same_dtype(self, other)
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g, other.shape))

        return from_op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g * self.data, other.shape))

        return from_op(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * self.dtype.type(-1)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def reshape(self, shape) -> "Tensor":
        shape = tuple(shape)
        old = self.shape

        def backward(g):
            if self.requires_grad:
                self.accumulate_grad(g.reshape(old))

        return from_op(self.data.reshape(shape), (self,), backward)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self, seed_grad=None):
        """Reverse-mode sweep; scalar outputs seed with 1 by default."""
        if seed_grad is None:
            if self.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit seed_grad")
            seed_grad = np.ones_like(self.data)
        else:
            seed_grad = np.asarray(seed_grad, dtype=self.data.dtype)
            if seed_grad.shape != self.shape:
                raise ValueError(f"seed_grad shape {seed_grad.shape} != {self.shape}")
        order = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.grad = seed_grad.copy()
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def from_op(data, parents, backward):
    """Tape node: gradient flows back iff some parent wants it."""
    data = np.asarray(data)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), dtype=data.dtype)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeMismatch(f"mixed dtypes {dt} and {t.dtype}")
    return dt
