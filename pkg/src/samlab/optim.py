"""Optimizers: GD/SGD with heavy-ball momentum, the SAM family, and the
closed-form step sizes and linear-rate bounds for interpolating problems.

SAM comes in two flavors. The normalized rule perturbs along the unit
gradient, x' = x - eta grad_f(x + rho grad_f(x)/||grad_f(x)||); the
unnormalized rule perturbs along the raw gradient. The mini-batch variant
averages per-sample gradients at both the base and the perturbed point.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .diffops import DiffFunction, FunctionFamily, value_and_grad
from .models import ModelSpec, mlp_init, squared_loss_fn, alpha_scaled_loss_fn, mlp_forward
from .params import ParamVector
from .record import EvalRow, RunRecord, StepRow
from .rng import make_rng

ZERO_GRAD_THRESHOLD = 1e-12

OPTIMIZER_KINDS = ("gd", "sgd", "sam")
RESERVED_OPTIMIZER_KINDS = ("adam", "adamw")
SCHEDULE_KINDS = ("constant", "step", "cosine", "inverse_sqrt", "linear")


@dataclass(frozen=True)
class Schedule:
    """Step-size schedule over a fixed number of total steps."""

    kind: str = "constant"
    decay: float = 0.1
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")

    def eta_at(self, eta0: float, t: int, total_steps: int) -> float:
        if self.kind == "constant":
            return eta0
        if self.kind == "step":
            k = sum(1 for m in self.milestones if t >= m)
            return eta0 * self.decay ** k
        if self.kind == "cosine":
            frac = t / max(total_steps, 1)
            return eta0 * 0.5 * (1.0 + math.cos(math.pi * frac))
        if self.kind == "inverse_sqrt":
            return eta0 / math.sqrt(1.0 + t)
        if self.kind == "linear":
            return eta0 * max(0.0, 1.0 - t / max(total_steps, 1))
        raise AssertionError(self.kind)

    @staticmethod
    def step_at_fractions(eta_fracs: Sequence[float], total_steps: int, decay: float = 0.1) -> "Schedule":
        """Step decay at the given fractions of the run, e.g. (0.5, 0.75)."""
        ms = tuple(sorted({int(frac * total_steps) for frac in eta_fracs}))
        return Schedule(kind="step", decay=decay, milestones=ms)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    eta: float = 0.1
    rho: float = 0.0
    normalized: bool = True
    momentum: float = 0.0
    batch_size: int = 1
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if self.kind in RESERVED_OPTIMIZER_KINDS:
            raise NotImplementedError(
                f"optimizer kind {self.kind!r} is reserved in the config schema but not implemented"
            )
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZER_KINDS}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


class SamStep(NamedTuple):
    x: ParamVector
    zero_gradient: bool


def sam_step(
    f: DiffFunction,
    x: ParamVector,
    eta: float,
    rho: float,
    normalized: bool = True,
) -> SamStep:
    """One SAM update on the scalar objective f.

    Normalized: ascend rho along the unit gradient, then descend with the
    gradient at the ascent point. A (near-)zero gradient in the normalized
    rule returns x unchanged with zero_gradient=True instead of raising;
    this occurs at exact minima and is benign.
    """
    g = value_and_grad(f, x)[1]
    if normalized:
        gn = g.norm()
        if gn <= ZERO_GRAD_THRESHOLD:
            return SamStep(x.copy(), True)
        ascent = x + (rho / gn) * g
    else:
        ascent = x + rho * g
    g_sam = value_and_grad(f, ascent)[1]
    return SamStep(x - eta * g_sam, False)


def gd_step(f: DiffFunction, x: ParamVector, eta: float) -> ParamVector:
    return x - eta * value_and_grad(f, x)[1]


def minibatch_sam_step(
    family: FunctionFamily,
    batch: Sequence[int],
    x: ParamVector,
    eta: float,
    rho: float,
) -> ParamVector:
    """Unnormalized mini-batch SAM: x - eta g_B(x + rho g_B(x))."""
    if len(batch) == 0:
        raise ValueError("mini-batch SAM requires a non-empty batch")
    g = family.mean_grad(x, batch)
    g_sam = family.mean_grad(x + rho * g, batch)
    return x - eta * g_sam


def sgd_step(
    grad: ParamVector,
    x: ParamVector,
    eta: float,
    momentum: float = 0.0,
    state: ParamVector | None = None,
) -> tuple[ParamVector, ParamVector]:
    """Heavy-ball step: v' = momentum v + grad, x' = x - eta v'."""
    v = ParamVector.zeros(x.layout) if state is None else state
    v = momentum * v + grad
    return x - eta * v, v


# -- theoretical step sizes and rates ----------------------------------------


@dataclass(frozen=True)
class ConvergenceConstants:
    """Problem constants for the interpolating linear-rate guarantee.

    beta: per-sample smoothness; lam: smoothness of the mean loss; alpha:
    PL constant of the mean loss; rho: SAM perturbation; batch_size: B.
    """

    beta: float
    lam: float
    alpha: float
    rho: float = 0.0
    batch_size: int = 1

    def __post_init__(self):
        if min(self.beta, self.lam, self.alpha) <= 0:
            raise ValueError("beta, lam, alpha must be positive")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        bound = self.rho_bound()
        if self.rho > bound:
            raise ValueError(
                f"rho={self.rho} exceeds the admissible bound "
                f"1/((beta/alpha + 1/2) beta) = {bound}"
            )

    def rho_bound(self) -> float:
        return 1.0 / ((self.beta / self.alpha + 0.5) * self.beta)

    def kappa(self) -> float:
        B = self.batch_size
        return ((B - 1) / 2.0 + self.beta / self.alpha) / B


def optimal_step_size(c: ConvergenceConstants) -> float:
    """Constant step size maximizing the per-step contraction.

    eta*_B = (1 - (kappa_B + 1/2) beta rho) / (2 lam kappa_B (beta rho + 1)^2)
    with kappa_B = (1/B)((B-1)/2 + beta/alpha). For B=1 this reduces to
    (alpha - (beta + alpha/2) beta rho) / (2 lam beta (beta rho + 1)^2).
    """
    kappa = c.kappa()
    numer = 1.0 - (kappa + 0.5) * c.beta * c.rho
    if numer <= 0:
        raise ValueError(
            f"rho={c.rho} exceeds the batch-size-{c.batch_size} admissible bound "
            f"1/((kappa_B + 1/2) beta) = {1.0 / ((kappa + 0.5) * c.beta)}"
        )
    return numer / (2.0 * c.lam * kappa * (c.beta * c.rho + 1.0) ** 2)


def contraction_factor(c: ConvergenceConstants) -> float:
    """Per-step factor 1 - (alpha eta*_B / 2)(1 - (kappa_B + 1/2) beta rho)."""
    eta = optimal_step_size(c)
    kappa = c.kappa()
    return 1.0 - 0.5 * c.alpha * eta * (1.0 - (kappa + 0.5) * c.beta * c.rho)


def convergence_bound(c: ConvergenceConstants, f0: float, t: int) -> float:
    """Guaranteed expected loss after t steps at the optimal step size."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return contraction_factor(c) ** t * f0


# -- training loop ------------------------------------------------------------


def _loss_builder(loss: str):
    if loss == "squared":
        return squared_loss_fn
    if loss == "alpha_scaled":
        return alpha_scaled_loss_fn
    raise ValueError(f"unknown loss kind {loss!r}")


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "inputs"):
        return np.asarray(data.inputs), np.asarray(data.encoded_targets())
    X, Y = data
    return np.asarray(X), np.asarray(Y)


def evaluate_metric(
    spec: ModelSpec,
    params: ParamVector,
    X: np.ndarray,
    Y: np.ndarray,
    metric: str,
    init_params: ParamVector | None = None,
) -> float:
    out = mlp_forward(spec, params, X, init_params)
    Y2 = Y[:, None] if Y.ndim == 1 else Y
    if metric == "mse":
        return float(np.mean(np.sum((out - Y2) ** 2, axis=1)))
    if metric == "accuracy":
        if out.shape[1] == 1:
            pred = (out[:, 0] > 0.5).astype(int)
            truth = (Y2[:, 0] > 0.5).astype(int)
        else:
            pred = np.argmax(out, axis=1)
            truth = np.argmax(Y2, axis=1)
        return float(np.mean(pred == truth))
    raise ValueError(f"unknown metric {metric!r}")


def train(
    spec: ModelSpec,
    data,
    loss: str,
    cfg: OptimizerConfig,
    steps: int,
    seed: int,
    snapshot_every: int = 0,
    *,
    init: ParamVector | str | list | tuple = "gauss_1_over_m",
    val_data=None,
    val_metric: str = "mse",
    eval_every: int = 0,
    sharpness_every: int = 0,
    config_hash: str = "",
    meta: dict | None = None,
) -> RunRecord:
    """Deterministic training trajectory.

    Batches are sampled without replacement within each epoch and the
    order is reshuffled every epoch from the run seed. Frozen tensors stay
    bit-identical to initialization; masked weights are zeroed at init and
    never move. A non-finite loss aborts and returns the partial record
    with the divergence flag set.
    """
    t_start = time.perf_counter()
    X, Y = _as_xy(data)
    n = X.shape[0]
    if isinstance(init, ParamVector):
        params = init.copy()
    else:
        params = mlp_init(spec, init, seed)
    if spec.mask is not None:
        params.data[spec.mask.data == 0.0] = 0.0
    init_params = params.copy() if spec.centered else None
    frozen = spec.frozen_index_mask()
    build_loss = _loss_builder(loss)

    batch_size = n if cfg.kind == "gd" else min(cfg.batch_size, n)
    rng = make_rng(seed, "batch_order")
    record = RunRecord(config_hash=config_hash, seed=seed, steps=steps, meta=meta or {})

    full_fn = build_loss(spec, X, Y, init_params)

    def run_eval(step: int) -> bool:
        try:
            train_loss = full_fn.value(params)
        except NonFiniteError:
            record.diverged = True
            return False
        if not math.isfinite(train_loss):
            record.diverged = True
            return False
        vm = None
        if val_data is not None:
            Xv, Yv = _as_xy(val_data)
            vm = evaluate_metric(spec, params, Xv, Yv, val_metric, init_params)
        sharp = None
        if sharpness_every and (step == 0 or step % sharpness_every == 0):
            from .landscape import sharpness_lmax

            sharp = sharpness_lmax(full_fn, params, seed=seed).value
        record.eval_rows.append(EvalRow(step, train_loss, vm, sharp))
        return True

    run_eval(0)
    if snapshot_every:
        record.snapshots.append((0, params.copy()))

    velocity = ParamVector.zeros(spec.layout())
    order = np.empty(0, dtype=np.int64)
    pos = n  # force reshuffle on first step
    diverged = False
    t_done = 0

    for t in range(steps):
        eta_t = cfg.schedule.eta_at(cfg.eta, t, steps)
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        batch = order[pos:pos + batch_size] if batch_size < n else slice(None)
        pos += batch_size

        fb = build_loss(spec, X[batch], Y[batch], init_params)
        try:
            loss_val, g = value_and_grad(fb, params)
        except NonFiniteError:
            diverged = True
            break
        if not math.isfinite(loss_val):
            diverged = True
            break
        g.data[frozen] = 0.0
        record.step_rows.append(StepRow(t, eta_t, loss_val, g.norm()))

        if cfg.kind == "sam" and cfg.rho > 0:
            if cfg.normalized:
                gn = g.norm()
                if gn <= ZERO_GRAD_THRESHOLD:
                    record.zero_grad_steps += 1
                    t_done = t + 1
                    _maybe_eval_snapshot(record, run_eval, snapshot_every, eval_every, t, params)
                    continue
                ascent = params + (cfg.rho / gn) * g
            else:
                ascent = params + cfg.rho * g
            try:
                _, g = value_and_grad(fb, ascent)
            except NonFiniteError:
                diverged = True
                break
            g.data[frozen] = 0.0

        velocity = cfg.momentum * velocity + g
        params = params - eta_t * velocity
        t_done = t + 1
        _maybe_eval_snapshot(record, run_eval, snapshot_every, eval_every, t, params)

    record.diverged = record.diverged or diverged
    if not record.diverged:
        if not record.eval_rows or record.eval_rows[-1].step != t_done:
            run_eval(t_done)
    if snapshot_every and (not record.snapshots or record.snapshots[-1][0] != t_done):
        record.snapshots.append((t_done, params.copy()))
    record.final_params = params
    record.meta.setdefault("completed_steps", t_done)
    record.wall_time_s = time.perf_counter() - t_start
    return record


def _maybe_eval_snapshot(record, run_eval, snapshot_every, eval_every, t, params):
    done = t + 1
    if eval_every and done % eval_every == 0:
        run_eval(done)
    if snapshot_every and done % snapshot_every == 0:
        record.snapshots.append((done, params.copy()))
