"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of operations needed by the policy objectives are
supported: affine maps, tanh, exp, log-softmax lookup, clip, elementwise
min and products. ``clip`` and ``minimum`` use the usual subgradient
convention: zero on the flat side of a clip, and the selected branch of a
min receives the whole upstream gradient (ties go to the first argument).
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    def __repr__(self):
        return f"Tensor({self.value!r})"

    @property
    def shape(self):
        return self.value.shape

    # graph plumbing ---------------------------------------------------
    def _accumulate(self, g):
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    order.append(n)
                    continue
                if id(n) in seen or not n.requires_grad:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.value) if grad is None else np.asarray(grad, dtype=float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out_shape_a, out_shape_b = self.shape, other.shape

        def bw(g):
            self._accumulate(_unbroadcast(g, out_shape_a))
            other._accumulate(_unbroadcast(g, out_shape_b))

        return Tensor(self.value + other.value, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g):
            self._accumulate(_unbroadcast(g * other.value, self.shape))
            other._accumulate(_unbroadcast(g * self.value, other.shape))

        return Tensor(self.value * other.value, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=float))

    def __matmul__(self, other):
        other = as_tensor(other)

        def bw(g):
            self._accumulate(g @ other.value.T)
            other._accumulate(self.value.T @ g)

        return Tensor(self.value @ other.value, (self, other), bw)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.value)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(self.value[idx], (self,), bw)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.value.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(old)))

    # reductions -------------------------------------------------------
    def sum(self, axis=None):
        shape = self.shape

        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape).copy())

        return Tensor(self.value.sum(axis=axis), (self,), bw)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis) / n

    # elementwise nonlinearities --------------------------------------
    def tanh(self):
        out = np.tanh(self.value)
        return Tensor(out, (self,), lambda g: self._accumulate(g * (1.0 - out ** 2)))

    def exp(self):
        out = np.exp(self.value)
        return Tensor(out, (self,), lambda g: self._accumulate(g * out))

    def log(self):
        return Tensor(np.log(self.value), (self,), lambda g: self._accumulate(g / self.value))

    def clip(self, lo, hi):
        mask = (self.value >= lo) & (self.value <= hi)
        return Tensor(np.clip(self.value, lo, hi), (self,), lambda g: self._accumulate(g * mask))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(x) -> Tensor:
    """A leaf that accumulates gradients."""
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value

    def bw(g):
        a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return Tensor(np.minimum(a.value, b.value), (a, b), bw)


def clip(x, lo, hi) -> Tensor:
    return as_tensor(x).clip(lo, hi)


def log_softmax_pick(logits, actions) -> Tensor:
    """``log softmax(logits)[n, actions[n]]`` for a ``(B, A)`` logit matrix."""
    logits = as_tensor(logits)
    actions = np.asarray(actions, dtype=int)
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logp_all = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(actions))

    def bw(g):
        probs = np.exp(logp_all)
        local = -probs * g[:, None]
        local[rows, actions] += g
        logits._accumulate(local)

    return Tensor(logp_all[rows, actions], (logits,), bw)
