"""Minimal reverse-mode differentiation on numpy arrays.

A Tensor records the primitive ops applied to it; a single reverse sweep
accumulates gradients into the leaves. Only the ops the path-measure
losses need are provided. ``stop_gradient`` realizes the detach device
used by the score-style loss gradients: same value, zero sensitivity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph; wraps a float ndarray."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    # -- graph construction helpers --------------------------------------
    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=float))

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.value + other.value, (self, other))
        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, (self,))
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.value * other.value, (self, other))
        def backward(g):
            return (_unbroadcast(g * other.value, self.shape),
                    _unbroadcast(g * self.value, other.shape))
        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.value / other.value, (self, other))
        def backward(g):
            return (_unbroadcast(g / other.value, self.shape),
                    _unbroadcast(-g * self.value / other.value ** 2, other.shape))
        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        other = self._lift(other)
        out = Tensor(self.value @ other.value, (self, other))
        def backward(g):
            return (g @ other.value.T, self.value.T @ g)
        out._backward = backward
        return out

    def __getitem__(self, idx):
        out = Tensor(self.value[idx], (self,))
        def backward(g):
            full = np.zeros_like(self.value)
            np.add.at(full, idx, g)
            return (full,)
        out._backward = backward
        return out

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), (self,))
        out._backward = lambda g: (g.reshape(self.shape),)
        return out

    def exp(self):
        v = np.exp(self.value)
        out = Tensor(v, (self,))
        out._backward = lambda g: (g * v,)
        return out

    def log(self):
        out = Tensor(np.log(self.value), (self,))
        out._backward = lambda g: (g / self.value,)
        return out

    def tanh(self):
        v = np.tanh(self.value)
        out = Tensor(v, (self,))
        out._backward = lambda g: (g * (1.0 - v * v),)
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,))
        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)
        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def logsumexp(self, axis: int):
        m = np.max(self.value, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.sum(np.exp(self.value - m), axis=axis)
        val = np.squeeze(m, axis=axis) + np.log(s)
        out = Tensor(val, (self,))
        def backward(g):
            soft = np.exp(self.value - np.expand_dims(val, axis))
            return (np.expand_dims(g, axis) * soft,)
        out._backward = backward
        return out

    # -- reverse sweep ----------------------------------------------------
    def backward(self):
        if self.value.shape != ():
            raise ValueError("backward() expects a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                # lazy accumulation: the first contribution is kept as is,
                # later ones allocate, so buffers are never mutated in place
                parent.grad = g if parent.grad is None else parent.grad + g


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    vals = [t.value for t in tensors]
    out = Tensor(np.concatenate(vals, axis=axis), tuple(tensors))
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def stop_gradient(t: Tensor) -> Tensor:
    """Same numeric value; the reverse sweep treats it as a constant."""
    if not isinstance(t, Tensor):
        return Tensor(np.asarray(t, dtype=float))
    return Tensor(t.value)


class Params:
    """Flat parameter vector with a (name, shape, offset) registry."""

    def __init__(self):
        self.registry: list[tuple[str, tuple, int]] = []
        self.vector = np.zeros(0)

    def add(self, name: str, init: np.ndarray) -> None:
        init = np.asarray(init, dtype=float)
        self.registry.append((name, init.shape, self.vector.size))
        self.vector = np.concatenate([self.vector, init.ravel()])

    def get(self, name: str, vector: np.ndarray | None = None) -> np.ndarray:
        vec = self.vector if vector is None else vector
        for nm, shape, off in self.registry:
            if nm == name:
                size = int(np.prod(shape)) if shape else 1
                return vec[off:off + size].reshape(shape)
        raise KeyError(name)

    def slice(self, theta: Tensor, name: str) -> Tensor:
        """Tape-tracked view of one named parameter."""
        for nm, shape, off in self.registry:
            if nm == name:
                size = int(np.prod(shape)) if shape else 1
                return theta[off:off + size].reshape(shape)
        raise KeyError(name)

    @property
    def size(self) -> int:
        return self.vector.size


class DenseNet:
    """Feed-forward net with two hidden layers and a dense skip: the output
    layer reads the concatenation of both hidden activations."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int = 1,
                 rng: np.random.Generator | None = None, prefix: str = "",
                 params: Params | None = None):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.params = params if params is not None else Params()
        rng = rng or np.random.default_rng(0)
        def init(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)
        p = prefix
        self.params.add(p + "W1", init((in_dim, hidden), in_dim))
        self.params.add(p + "b1", np.zeros(hidden))
        self.params.add(p + "W2", init((hidden, hidden), hidden))
        self.params.add(p + "b2", np.zeros(hidden))
        self.params.add(p + "W3", np.zeros((2 * hidden, out_dim)))
        self.params.add(p + "b3", np.zeros(out_dim))
        self.prefix = prefix

    def forward_np(self, vector: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass, input (B, in_dim) -> (B, out_dim)."""
        g = lambda name: self.params.get(self.prefix + name, vector)
        h1 = np.tanh(x @ g("W1") + g("b1"))
        h2 = np.tanh(h1 @ g("W2") + g("b2"))
        return np.concatenate([h1, h2], axis=-1) @ g("W3") + g("b3")

    def forward(self, theta: Tensor, x: np.ndarray) -> Tensor:
        """Tape-tracked forward pass; x is a constant input batch."""
        s = lambda name: self.params.slice(theta, self.prefix + name)
        xt = Tensor(x)
        h1 = (xt @ s("W1") + s("b1")).tanh()
        h2 = (h1 @ s("W2") + s("b2")).tanh()
        return concat([h1, h2], axis=-1) @ s("W3") + s("b3")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(size: int) -> "AdamState":
        return AdamState(m=np.zeros(size), v=np.zeros(size))


def adam_step(vector: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in optimizer step")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new_vec = vector - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_vec, AdamState(m=m, v=v, t=t)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           step: float = 1e-5) -> np.ndarray:
    """Central finite differences; the independent oracle for grad checks."""
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp = x.copy(); xp[i] += step
        xm = x.copy(); xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g
