"""Differentiable scalar objectives and their derivative oracles.

A DiffFunction evaluates a flat ParamVector to a scalar loss by running a
user-supplied tape builder over named leaf tensors. ``grad`` is analytic
reverse-mode; ``finite_diff_grad`` is the independent central-difference
oracle; Hessian-vector products and dense Hessians are finite differences of
the analytic gradient, accurate enough for power iteration and small-d
spectral analysis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor
from .params import ParamLayout, ParamVector

DEFAULT_HESSIAN_CAP = 2000


@dataclass(frozen=True)
class DiffFunction:
    """Scalar objective: named leaf tensors -> scalar Tensor.

    ``build`` must be deterministic given the leaves and any state it
    closes over (dataset slices etc.). Evaluation is differentiable almost
    everywhere; ReLU kinks are allowed.
    """

    build: Callable[[Mapping[str, Tensor]], Tensor]
    layout: ParamLayout
    name: str = "loss"

    def _leaves(self, x: ParamVector, requires_grad: bool) -> dict[str, Tensor]:
        if x.layout != self.layout:
            raise ValueError("parameter layout does not match this function")
        return {
            e.name: Tensor(x.view(e.name).copy(), requires_grad=requires_grad, name=e.name)
            for e in self.layout.entries
        }

    def value(self, x: ParamVector) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.build(self._leaves(x, requires_grad=False))
        return out.item()

    def __call__(self, x: ParamVector) -> float:
        return self.value(x)


def value_and_grad(f: DiffFunction, x: ParamVector) -> tuple[float, ParamVector]:
    """Loss and analytic reverse-mode gradient at x, in x's layout."""
    leaves = f._leaves(x, requires_grad=True)
    with np.errstate(over="ignore", invalid="ignore"):
        out = f.build(leaves)
        out.backward()
    g = ParamVector.zeros(f.layout)
    for name, leaf in leaves.items():
        if leaf.grad is not None:
            g.view(name)[...] = leaf.grad
    return out.item(), g


def grad(f: DiffFunction, x: ParamVector) -> ParamVector:
    return value_and_grad(f, x)[1]


def finite_diff_grad(f: DiffFunction, x: ParamVector, h: float = 1e-5) -> ParamVector:
    """Central-difference gradient oracle, (f(x+h e_j) - f(x-h e_j)) / 2h."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    g = ParamVector.zeros(x.layout)
    xp = x.copy()
    for j in range(len(x)):
        orig = xp.data[j]
        xp.data[j] = orig + h
        fp = f.value(xp)
        xp.data[j] = orig - h
        fm = f.value(xp)
        xp.data[j] = orig
        g.data[j] = (fp - fm) / (2.0 * h)
    return g


def hvp(f: DiffFunction, x: ParamVector, v: ParamVector) -> ParamVector:
    """Hessian-vector product H(x) v by central differences of grad.

    Uses a unit direction and rescales, with step h = 1e-3 (1 + ||x||).
    """
    vnorm = v.norm()
    if vnorm == 0.0:
        raise ValueError("hvp requires a nonzero direction vector")
    h = 1e-3 * (1.0 + x.norm())
    vhat = v * (1.0 / vnorm)
    gp = grad(f, x + h * vhat)
    gm = grad(f, x - h * vhat)
    return (gp - gm) * (vnorm / (2.0 * h))


def dense_hessian(
    f: DiffFunction,
    x: ParamVector,
    max_dim: int = DEFAULT_HESSIAN_CAP,
    symmetrize: bool = True,
) -> np.ndarray:
    """Dense d x d Hessian from column-wise hvp, symmetrized as (A + A^T)/2."""
    d = len(x)
    if d > max_dim:
        raise ValueError(
            f"dimension {d} exceeds the dense-Hessian cap {max_dim}; "
            "use hvp-based methods (power iteration) instead"
        )
    H = np.empty((d, d))
    e = ParamVector.zeros(x.layout)
    for j in range(d):
        e.data[j] = 1.0
        H[:, j] = hvp(f, x, e).data
        e.data[j] = 0.0
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def from_scalar(fn: Callable[[Tensor], Tensor], name: str = "f") -> DiffFunction:
    """Wrap a one-argument scalar function of a single tensor 'x'."""
    layout = ParamLayout.from_shapes([("x", (1,))])

    def build(leaves: Mapping[str, Tensor]) -> Tensor:
        return fn(leaves["x"]).sum()

    return DiffFunction(build, layout, name=name)


def quadratic(H: np.ndarray, center: np.ndarray | None = None, name: str = "quadratic") -> DiffFunction:
    """f(x) = 1/2 (x - c)^T H (x - c) for a fixed symmetric matrix H."""
    H = np.asarray(H, dtype=np.float64)
    d = H.shape[0]
    c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    layout = ParamLayout.from_shapes([("x", (d,))])

    def build(leaves: Mapping[str, Tensor]) -> Tensor:
        z = leaves["x"] - c
        return (z * (z @ H)).sum() * 0.5

    return DiffFunction(build, layout, name=name)


@dataclass
class FunctionFamily:
    """Per-sample objectives f_i and their mean f = (1/n) sum_i f_i."""

    members: list[DiffFunction]
    layout: ParamLayout = field(init=False)

    def __post_init__(self):
        if not self.members:
            raise ValueError("function family needs at least one member")
        self.layout = self.members[0].layout
        for m in self.members:
            if m.layout != self.layout:
                raise ValueError("family members disagree on parameter layout")

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, i: int) -> DiffFunction:
        return self.members[i]

    def mean_value(self, x: ParamVector) -> float:
        return float(np.mean([m.value(x) for m in self.members]))

    def mean_grad(self, x: ParamVector, batch=None) -> ParamVector:
        idx = range(len(self.members)) if batch is None else batch
        g = ParamVector.zeros(self.layout)
        count = 0
        for i in idx:
            g = g + grad(self.members[i], x)
            count += 1
        if count == 0:
            raise ValueError("empty batch")
        return g * (1.0 / count)

    def as_mean_function(self, name: str = "mean_loss") -> DiffFunction:
        members = self.members
        inv = 1.0 / len(members)

        def build(leaves: Mapping[str, Tensor]) -> Tensor:
            total = members[0].build(leaves)
            for m in members[1:]:
                total = total + m.build(leaves)
            return total * inv

        return DiffFunction(build, self.layout, name=name)
