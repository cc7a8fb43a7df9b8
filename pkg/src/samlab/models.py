"""Small dense model zoo.

MLPs with per-layer freeze flags, optional pruning mask, optional output
centering and loss scaling; the two-factor linear network for the low-rank
regression benchmark; and a piecewise-linear segment counter for 1-D nets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor, relu
from .diffops import DiffFunction, FunctionFamily
from .params import ParamLayout, ParamVector
from .rng import make_rng

ACTIVATIONS = ("relu", "identity")
INIT_SCHEMES = ("gauss_1_over_m", "gauss_unit")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description for a dense MLP.

    layer_widths includes the input and output dimensions, so an MLP with
    one hidden layer of m units on scalar data is (1, m, 1). Freeze flags
    are per layer, split between weights and biases so that protocols that
    train only a subset of tensors can be expressed. An optional binary
    mask in parameter layout is applied multiplicatively to weights at
    forward time (pruned weights then also receive zero gradient).
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    train_weights: tuple[bool, ...] | None = None
    train_biases: tuple[bool, ...] | None = None
    with_bias: tuple[bool, ...] | None = None
    mask: ParamVector | None = None
    centered: bool = False
    alpha: float = 1.0

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for name in ("train_weights", "train_biases", "with_bias"):
            flags = getattr(self, name)
            if flags is not None and len(flags) != self.n_layers:
                raise ValueError(f"{name} needs one flag per layer")
        if self.mask is not None and self.mask.layout != self.layout():
            raise ValueError("mask layout does not match model layout")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def bias_flags(self) -> tuple[bool, ...]:
        return self.with_bias if self.with_bias is not None else (True,) * self.n_layers

    def layout(self) -> ParamLayout:
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for i in range(self.n_layers):
            fan_in, fan_out = self.layer_widths[i], self.layer_widths[i + 1]
            shapes.append((f"w{i}", (fan_in, fan_out)))
            if self.bias_flags()[i]:
                shapes.append((f"b{i}", (fan_out,)))
        return ParamLayout.from_shapes(shapes)

    def frozen_index_mask(self) -> np.ndarray:
        """Boolean flat mask, True where a parameter entry is frozen."""
        layout = self.layout()
        frozen = np.zeros(layout.size, dtype=bool)
        tw = self.train_weights or (True,) * self.n_layers
        tb = self.train_biases or (True,) * self.n_layers
        for i in range(self.n_layers):
            if not tw[i]:
                e = layout.entry(f"w{i}")
                frozen[e.offset:e.offset + e.size] = True
            if self.bias_flags()[i] and not tb[i]:
                e = layout.entry(f"b{i}")
                frozen[e.offset:e.offset + e.size] = True
        return frozen


def mlp_init(spec: ModelSpec, scheme, seed: int) -> ParamVector:
    """Gaussian init, deterministic given seed.

    ``scheme`` is one of "gauss_1_over_m" (std 1/sqrt(fan_out)),
    "gauss_unit" (std 1), ("gauss_custom", sigma), or a per-layer list of
    those. Biases use the same std as their layer's weights.
    """
    schemes = list(scheme) if isinstance(scheme, (list, tuple)) and not _is_custom(scheme) else [scheme] * spec.n_layers
    if len(schemes) != spec.n_layers:
        raise ValueError("need one init scheme per layer")
    rng = make_rng(seed, "mlp_init")
    layout = spec.layout()
    params = ParamVector.zeros(layout)
    for i in range(spec.n_layers):
        fan_out = spec.layer_widths[i + 1]
        sigma = _scheme_sigma(schemes[i], fan_out)
        params.view(f"w{i}")[...] = rng.normal(0.0, sigma, size=params.view(f"w{i}").shape)
        if spec.bias_flags()[i]:
            params.view(f"b{i}")[...] = rng.normal(0.0, sigma, size=fan_out)
    return params


def _is_custom(scheme) -> bool:
    return (
        isinstance(scheme, (list, tuple))
        and len(scheme) == 2
        and scheme[0] == "gauss_custom"
        and isinstance(scheme[1], (int, float))
    )


def _scheme_sigma(scheme, fan_out: int) -> float:
    if scheme == "gauss_1_over_m":
        return 1.0 / np.sqrt(fan_out)
    if scheme == "gauss_unit":
        return 1.0
    if _is_custom(scheme):
        return float(scheme[1])
    raise ValueError(f"unknown init scheme {scheme!r}")


def _masked_weight(spec: ModelSpec, params: ParamVector, i: int) -> np.ndarray:
    W = params.view(f"w{i}")
    if spec.mask is not None:
        W = W * spec.mask.view(f"w{i}")
    return W


def _forward_np(spec: ModelSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    h = X
    for i in range(spec.n_layers):
        h = h @ _masked_weight(spec, params, i)
        if spec.bias_flags()[i]:
            h = h + params.view(f"b{i}")
        if spec.activation == "relu" and i < spec.n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward(
    spec: ModelSpec,
    params: ParamVector,
    x: np.ndarray,
    init_params: ParamVector | None = None,
) -> np.ndarray:
    """Deterministic forward pass; centered models subtract the init output."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != spec.layer_widths[0]:
        raise ValueError(
            f"input dimension {X.shape[1]} does not match model input width {spec.layer_widths[0]}"
        )
    out = _forward_np(spec, params, X)
    if spec.centered:
        if init_params is None:
            raise ValueError("centered model needs init_params")
        out = out - _forward_np(spec, init_params, X)
    return out[0] if single else out


def _forward_tape(
    spec: ModelSpec, leaves: Mapping[str, Tensor], X: np.ndarray
) -> Tensor:
    h: Tensor | np.ndarray = Tensor(X, name="inputs")
    for i in range(spec.n_layers):
        W = leaves[f"w{i}"]
        if spec.mask is not None:
            W = W * spec.mask.view(f"w{i}")
        h = h @ W
        if spec.bias_flags()[i]:
            h = h + leaves[f"b{i}"]
        if spec.activation == "relu" and i < spec.n_layers - 1:
            h = relu(h)
    return h


def squared_loss_fn(
    spec: ModelSpec,
    X: np.ndarray,
    Y: np.ndarray,
    init_params: ParamVector | None = None,
    name: str = "squared_loss",
) -> DiffFunction:
    """Mean over samples of the squared l2 residual ||f(x) - y||^2."""
    return _loss_fn(spec, X, Y, 1.0, init_params, name)


def alpha_scaled_loss_fn(
    spec: ModelSpec,
    X: np.ndarray,
    Y: np.ndarray,
    init_params: ParamVector | None = None,
    name: str = "alpha_scaled_loss",
) -> DiffFunction:
    """Mean over samples of ||f(x) - y/alpha||^2 with alpha from the spec."""
    return _loss_fn(spec, X, Y, spec.alpha, init_params, name)


def _loss_fn(spec, X, Y, alpha, init_params, name) -> DiffFunction:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError("inputs and targets disagree on sample count")
    target = Y / alpha
    if spec.centered:
        if init_params is None:
            raise ValueError("centered model needs init_params")
        # the tape computes the raw forward pass; fold the subtracted init
        # output into the target so the residual matches the centered model
        target = target + _forward_np(spec, init_params, X)
    inv_n = 1.0 / X.shape[0]

    def build(leaves: Mapping[str, Tensor]) -> Tensor:
        r = _forward_tape(spec, leaves, X) - target
        return (r * r).sum() * inv_n

    return DiffFunction(build, spec.layout(), name=name)


def alpha_scaled_loss(
    spec: ModelSpec,
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    init_params: ParamVector | None = None,
) -> float:
    """Squared distance between model output and y/alpha, mean over samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:  # single sample with vector target
        x, y = x[None, :], y.reshape(1, -1)
    return alpha_scaled_loss_fn(spec, x, y, init_params).value(params)


def per_sample_family(
    spec: ModelSpec,
    X: np.ndarray,
    Y: np.ndarray,
    init_params: ParamVector | None = None,
    alpha_scaled: bool = False,
) -> FunctionFamily:
    """One DiffFunction per training sample, sharing the model layout."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    alpha = spec.alpha if alpha_scaled else 1.0
    members = [
        _loss_fn(spec, X[i:i + 1], Y[i:i + 1], alpha, init_params, f"loss[{i}]")
        for i in range(X.shape[0])
    ]
    return FunctionFamily(members)


# -- two-factor linear network ----------------------------------------------


@dataclass(frozen=True)
class FactorizationProblem:
    """Low-rank regression target: fit W2 W1 x to A x over sampled inputs."""

    A: np.ndarray
    rank: int
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=np.float64))
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        out_dim, in_dim = self.A.shape
        if not 1 <= self.rank <= out_dim:
            raise ValueError(f"rank must be in [1, {out_dim}]")
        if self.samples.ndim != 2 or self.samples.shape[1] != in_dim:
            raise ValueError("samples must be (n, in_dim)")

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]

    def layout(self) -> ParamLayout:
        return ParamLayout.from_shapes(
            [("w1", (self.rank, self.in_dim)), ("w2", (self.out_dim, self.rank))]
        )


def gen_factorization_problem(
    rank: int,
    n_samples: int = 1000,
    out_dim: int = 10,
    in_dim: int = 6,
    seed: int = 0,
) -> FactorizationProblem:
    rng = make_rng(seed, "factorization")
    A = rng.normal(size=(out_dim, in_dim))
    samples = rng.normal(size=(n_samples, in_dim))
    return FactorizationProblem(A=A, rank=rank, samples=samples)


def factorization_loss(problem: FactorizationProblem, W1: np.ndarray, W2: np.ndarray) -> float:
    """Empirical mean of ||W2 W1 x - A x||^2 over the problem's samples."""
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    if W1.shape != (problem.rank, problem.in_dim) or W2.shape != (problem.out_dim, problem.rank):
        raise ValueError("factor shapes inconsistent with problem rank")
    R = problem.samples @ (W2 @ W1).T - problem.samples @ problem.A.T
    return float(np.mean(np.sum(R * R, axis=1)))


def factorization_family(problem: FactorizationProblem) -> FunctionFamily:
    """Per-sample losses ||W2 W1 x_i - A x_i||^2 over the factor layout."""
    layout = problem.layout()
    members = []
    for i in range(problem.samples.shape[0]):
        x = problem.samples[i]
        target = problem.A @ x

        def build(leaves: Mapping[str, Tensor], x=x, target=target) -> Tensor:
            r = leaves["w2"] @ (leaves["w1"] @ x) - target
            return (r * r).sum()

        members.append(DiffFunction(build, layout, name=f"fact[{i}]"))
    return FunctionFamily(members)


def factorization_init(problem: FactorizationProblem, sigma: float, seed: int) -> ParamVector:
    rng = make_rng(seed, "factorization_init")
    params = ParamVector.zeros(problem.layout())
    params.view("w1")[...] = rng.normal(0.0, sigma, size=(problem.rank, problem.in_dim))
    params.view("w2")[...] = rng.normal(0.0, sigma, size=(problem.out_dim, problem.rank))
    return params


# -- piecewise-linear complexity ---------------------------------------------


def count_linear_segments(
    spec: ModelSpec,
    params: ParamVector,
    interval: tuple[float, float],
    grid: int = 2001,
    tol: float = 1e-3,
    init_params: ParamVector | None = None,
) -> int:
    """Number of linear pieces of a scalar 1-D network on [lo, hi].

    Estimated from second differences on a uniform grid: a cell is a
    segment boundary when its slope change exceeds tol * (1 + local slope
    magnitude); boundaries closer than 2 grid cells are merged.
    """
    if spec.layer_widths[0] != 1 or spec.layer_widths[-1] != 1:
        raise ValueError("segment counting requires a 1-D input/output model")
    if grid < 1000:
        raise ValueError("grid resolution must be at least 1000")
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError("interval must satisfy lo < hi")
    xs = np.linspace(lo, hi, grid)
    ys = mlp_forward(spec, params, xs[:, None], init_params)[:, 0]
    h = xs[1] - xs[0]
    slopes = np.diff(ys) / h
    slope_change = np.abs(np.diff(slopes))
    local_slope = np.maximum(np.abs(slopes[:-1]), np.abs(slopes[1:]))
    boundary_idx = np.flatnonzero(slope_change > tol * (1.0 + local_slope))
    if boundary_idx.size == 0:
        return 1
    merged = 1 + int(np.sum(np.diff(boundary_idx) > 2))
    return merged + 1
