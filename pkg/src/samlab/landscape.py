"""Loss-landscape measurement.

Empirical smoothness and PL constants along trajectory segments, top
Hessian eigenvalue by power iteration, the rho-regularized objective (mean
loss plus rho times the mean per-sample gradient norm), the ascent-point
gradient gap, checkers for the two gradient-alignment/norm inequalities
underlying the mini-batch linear-rate proof, and PCA projection of
parameter trajectories onto directions spanned by converged minima.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .diffops import DiffFunction, FunctionFamily, grad, hvp
from .params import ParamVector
from .rng import make_rng

DEFAULT_DELTA = 0.1


def _gamma_grid(delta: float) -> np.ndarray:
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    count = int(round(1.0 / delta))
    return np.arange(1, count + 1) * delta


def empirical_beta(
    f: DiffFunction,
    x_k: ParamVector,
    x_k1: ParamVector,
    delta: float = DEFAULT_DELTA,
) -> float:
    """Empirical smoothness along the segment d = x_{k+1} - x_k.

    max over gamma in {delta, 2 delta, ..., 1} of
    ||grad f(x_k + gamma d) - grad f(x_k)|| / ||gamma d||.
    """
    d = x_k1 - x_k
    dn = d.norm()
    if dn == 0.0:
        raise ValueError("empirical_beta needs a nonzero displacement")
    g0 = grad(f, x_k)
    best = 0.0
    for gamma in _gamma_grid(delta):
        g = grad(f, x_k + gamma * d)
        best = max(best, (g - g0).norm() / (gamma * dn))
    return best


def empirical_alpha(
    f: DiffFunction,
    x_k: ParamVector,
    x_k1: ParamVector,
    f_star: float,
    delta: float = DEFAULT_DELTA,
) -> float:
    """Empirical PL constant along the segment d = x_{k+1} - x_k.

    min over the gamma grid of ||grad f(x_k + gamma d)||^2 /
    (f(x_k + gamma d) - f_star); grid points at the optimum are skipped.
    """
    d = x_k1 - x_k
    best = np.inf
    for gamma in _gamma_grid(delta):
        x = x_k + gamma * d
        gap = f.value(x) - f_star
        if gap <= 1e-12:
            continue
        best = min(best, grad(f, x).norm() ** 2 / gap)
    if not np.isfinite(best):
        raise ValueError("PL constant undefined: all grid points at the optimum")
    return best


class SharpnessEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int


def sharpness_lmax(
    f: DiffFunction,
    x: ParamVector,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
) -> SharpnessEstimate:
    """Top Hessian eigenvalue at x by power iteration on Hessian-vector
    products, returning the Rayleigh quotient at convergence (relative
    change below tol) or at the iteration cap (flagged, not an error)."""
    rng = make_rng(seed, "power_iteration")
    v = ParamVector(rng.normal(size=len(x)), x.layout)
    v = v * (1.0 / v.norm())
    lam = 0.0
    for it in range(1, iters + 1):
        hv = hvp(f, x, v)
        norm = hv.norm()
        if norm == 0.0:
            return SharpnessEstimate(0.0, True, it)
        new_lam = v.dot(hv)
        v = hv * (1.0 / norm)
        if it > 1 and abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            return SharpnessEstimate(new_lam, True, it)
        lam = new_lam
    return SharpnessEstimate(lam, False, iters)


def implicit_reg_objective(family: FunctionFamily, x: ParamVector, rho: float) -> float:
    """Mean loss plus rho times the mean per-sample gradient norm."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    base = family.mean_value(x)
    if rho == 0.0:
        return base
    norms = [grad(f, x).norm() for f in family.members]
    return base + rho * float(np.mean(norms))


def perturbation_gap(f: DiffFunction, x: ParamVector, rho: float) -> float:
    """||grad f(x + rho grad f/||grad f||) - grad f(x)||, the smoothness-
    bounded distance between the ascent-point and base gradients."""
    g = grad(f, x)
    gn = g.norm()
    if gn <= 1e-12:
        raise ValueError("perturbation gap undefined at a zero-gradient point")
    g2 = grad(f, x + (rho / gn) * g)
    return (g2 - g).norm()


def lemma_checks(
    family: FunctionFamily, x: ParamVector, rho: float, beta: float
) -> tuple[float, float]:
    """Margins of the two per-sample inequalities used by the linear-rate
    proof, evaluated at x and minimized over samples.

    Alignment: <g_i(x + rho g_i), g(x)> >= <g_i, g> - (beta rho / 2)(||g_i||^2 + ||g||^2);
    returned margin is LHS - RHS. Norm: ||g_i(x + rho g_i)||^2 <=
    (beta rho + 1)^2 ||g_i||^2; returned margin is RHS - LHS. Both are
    non-negative whenever beta is a valid smoothness constant for each f_i.
    """
    g_full = family.mean_grad(x)
    align_margin = np.inf
    norm_margin = np.inf
    for f in family.members:
        gi = grad(f, x)
        gi_pert = grad(f, x + rho * gi)
        lhs = gi_pert.dot(g_full)
        rhs = gi.dot(g_full) - 0.5 * beta * rho * (gi.norm() ** 2 + g_full.norm() ** 2)
        align_margin = min(align_margin, lhs - rhs)
        norm_margin = min(
            norm_margin, (beta * rho + 1.0) ** 2 * gi.norm() ** 2 - gi_pert.norm() ** 2
        )
    return float(align_margin), float(norm_margin)


# -- trajectory projection -----------------------------------------------------


@dataclass(frozen=True)
class TrajectoryBundle:
    """Parameter snapshots plus converged minima used as PCA anchors."""

    snapshots: list[ParamVector]
    anchors: list[ParamVector]
    labels: list[str] | None = None

    def __post_init__(self):
        if len(self.anchors) < 2:
            raise ValueError("PCA projection needs at least 2 anchors")
        dims = {len(p) for p in self.snapshots} | {len(p) for p in self.anchors}
        if len(dims) != 1:
            raise ValueError("snapshots and anchors must share one dimension")
        if self.labels is not None and len(self.labels) != len(self.snapshots):
            raise ValueError("need one label per snapshot")


@dataclass(frozen=True)
class PcaProjection:
    coords: np.ndarray
    anchor_coords: np.ndarray
    explained: tuple[float, float]
    directions: np.ndarray
    center: np.ndarray
    anchor_rank: int


def pca_project(bundle: TrajectoryBundle) -> PcaProjection:
    """Project snapshots onto the top-2 PCA directions of the anchors.

    The center is the anchor mean; directions are right singular vectors
    of anchor deviations, sign-fixed so each direction's first nonzero
    coordinate is positive. Reports explained variance ratios over the
    anchor scatter. Identical anchors (zero variation) are an error;
    collinear anchors project with the full variance on component one.
    """
    A = np.stack([p.data for p in bundle.anchors])
    center = A.mean(axis=0)
    dev = A - center
    _, svals, vt = np.linalg.svd(dev, full_matrices=False)
    scale = svals[0] if svals.size else 0.0
    if scale == 0.0:
        raise ValueError("anchors are identical: no directions to project onto")
    total = float(np.sum(svals ** 2))
    rank = int(np.sum(svals > 1e-12 * scale))
    if vt.shape[0] < 2:
        # A 2-anchor bundle spans one direction; complete an orthonormal pair.
        d = vt.shape[1]
        basis = np.eye(d)[: 2]
        v2 = basis[1] if abs(basis[0] @ vt[0]) > 0.9 else basis[0]
        v2 = v2 - (v2 @ vt[0]) * vt[0]
        vt = np.vstack([vt[0], v2 / np.linalg.norm(v2)])
        svals = np.array([svals[0], 0.0])
    dirs = vt[:2].copy()
    for i in range(2):
        nz = np.flatnonzero(np.abs(dirs[i]) > 0)
        if nz.size and dirs[i][nz[0]] < 0:
            dirs[i] = -dirs[i]
    explained = (float(svals[0] ** 2 / total), float(svals[1] ** 2 / total))
    S = np.stack([p.data for p in bundle.snapshots]) if bundle.snapshots else np.empty((0, A.shape[1]))
    return PcaProjection(
        coords=(S - center) @ dirs.T,
        anchor_coords=dev @ dirs.T,
        explained=explained,
        directions=dirs,
        center=center,
        anchor_rank=rank,
    )
