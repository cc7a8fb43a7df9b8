"""Minimal reverse-mode tape over numpy arrays.

First-order only: each op records a backward closure; ``Tensor.backward()``
walks the tape in reverse topological order. Dense and vectorized (batch
dimensions are plain array axes), intended for models up to a few 10^4
parameters. Higher derivatives are obtained elsewhere by finite differences
of these analytic gradients.

ReLU's derivative at exactly 0 is defined as 0.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """An op produced inf/nan; carries the name of the offending tensor."""

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite values in tensor {tensor_name!r}")
        self.tensor_name = tensor_name


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(name)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "tensor",
        _parents: Sequence["Tensor"] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- graph construction -------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backprop from a scalar output through the recorded tape."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                _check_finite_grads(node)

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.data.shape})"

    # -- operator sugar ------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: int):
        return power(self, p)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _check_finite_grads(node: Tensor) -> None:
    for p in node._parents:
        if p.requires_grad and p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(p.name)


def as_tensor(x, name: str = "const") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient g back to the given broadcast-source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _op(name, data, parents, backward, requires_grad) -> Tensor:
    _check_finite(data, name)
    if not requires_grad:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, name=name, _parents=parents, _backward=backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _op("add", out, (a, b), backward, rg)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _op("sub", out, (a, b), backward, rg)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _op("mul", out, (a, b), backward, rg)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    rg = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.T if b.data.ndim > 1 else np.outer(g, b.data)
            a._accum(ga.reshape(a.data.shape))
        if b.requires_grad:
            gb = a.data.T @ g if a.data.ndim > 1 else np.outer(a.data, g)
            b._accum(gb.reshape(b.data.shape))

    return _op("matmul", out, (a, b), backward, rg)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum(g * (a.data > 0.0))

    return _op("relu", out, (a,), backward, a.requires_grad)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out * out))

    return _op("tanh", out, (a,), backward, a.requires_grad)


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = np.sin(a.data)

    def backward(g):
        a._accum(g * np.cos(a.data))

    return _op("sin", out, (a,), backward, a.requires_grad)


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = np.cos(a.data)

    def backward(g):
        a._accum(-g * np.sin(a.data))

    return _op("cos", out, (a,), backward, a.requires_grad)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _op("exp", out, (a,), backward, a.requires_grad)


def power(a, p: int) -> Tensor:
    a = as_tensor(a)
    p = int(p)
    out = a.data ** p

    def backward(g):
        if p == 0:
            return
        a._accum(g * p * a.data ** (p - 1))

    return _op(f"pow{p}", out, (a,), backward, a.requires_grad)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.data

    def backward(g):
        a._accum(2.0 * g * a.data)

    return _op("square", out, (a,), backward, a.requires_grad)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum()

    def backward(g):
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _op("sum", out, (a,), backward, a.requires_grad)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean()
    inv = 1.0 / a.data.size

    def backward(g):
        a._accum(np.broadcast_to(g * inv, a.data.shape).copy())

    return _op("mean", out, (a,), backward, a.requires_grad)
