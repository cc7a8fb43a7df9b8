"""Shared helpers for building random models and test objectives."""
from __future__ import annotations

import numpy as np

from samlab.models import ModelSpec, mlp_init, squared_loss_fn
from samlab.params import ParamVector
from samlab.rng import make_rng


def random_mlp(seed: int, widths=None, activation="relu"):
    """Random small MLP spec, params, and a squared-loss objective."""
    rng = make_rng(seed, "test_mlp")
    if widths is None:
        widths = (int(rng.integers(2, 8)), int(rng.integers(4, 16)), 1)
    spec = ModelSpec(layer_widths=tuple(widths), activation=activation)
    params = mlp_init(spec, "gauss_1_over_m", seed)
    n = int(rng.integers(6, 20))
    X = rng.normal(size=(n, widths[0]))
    Y = rng.normal(size=(n,))
    return spec, params, squared_loss_fn(spec, X, Y), X, Y


def relu_preact_margin(spec: ModelSpec, params: ParamVector, X: np.ndarray) -> float:
    """Smallest |preactivation| across hidden units and samples."""
    h = np.atleast_2d(X)
    margin = np.inf
    for i in range(spec.n_layers - 1):
        h = h @ params.view(f"w{i}")
        if spec.bias_flags()[i]:
            h = h + params.view(f"b{i}")
        margin = min(margin, float(np.abs(h).min()))
        h = np.maximum(h, 0.0)
    return margin


def mlps_with_kink_margin(count: int, min_margin: float, widths=None, start_seed: int = 0):
    """First `count` random MLPs whose preactivations stay at least
    min_margin away from the ReLU kinks (where Hessians are defined)."""
    found, seed = [], start_seed
    while len(found) < count:
        spec, params, fn, X, Y = random_mlp(seed=seed, widths=widths)
        if relu_preact_margin(spec, params, X) >= min_margin:
            found.append((spec, params, fn, X, Y))
        seed += 1
        if seed - start_seed > 500:
            raise RuntimeError("could not find enough kink-separated nets")
    return found


def random_psd_ensemble(seed: int, d: int, n: int, scale: float = 1.0) -> np.ndarray:
    """Stack of n random symmetric PSD d x d matrices."""
    rng = make_rng(seed, "test_ensemble")
    out = np.empty((n, d, d))
    for i in range(n):
        B = rng.normal(size=(d, d)) / np.sqrt(d)
        out[i] = scale * (B @ B.T)
    return out


def random_quadratic_family(seed: int, d: int, n: int):
    """Random per-sample quadratics 1/2 (x-c_i)^T H_i (x-c_i) with PSD H_i."""
    from samlab.diffops import FunctionFamily, quadratic

    rng = make_rng(seed, "test_quad_family")
    Hs = random_psd_ensemble(seed, d, n)
    centers = rng.normal(size=(n, d))
    members = [quadratic(H, c) for H, c in zip(Hs, centers)]
    return FunctionFamily(members), Hs, centers
