"""Linear stability of stochastic SAM around a minimizer.

Given per-sample Hessians {H_i} at a candidate minimum, the linearized
stochastic SAM iteration is

    x_{t+1} = (I - eta H_xi - eta rho H_xi^2) x_t,   xi ~ Uniform{1..n},

(coordinates translated so the minimizer sits at the origin). The mean
squared iterate contracts iff the largest eigenvalue of

    (I - eta H - eta rho H^2)^2 + eta (eta - 2 rho)(M_2 - H^2)
        + 2 eta^2 rho (M_3 - H^3) + eta^2 rho^2 (M_4 - H^4)

is at most 1, where H is the mean Hessian and M_k the k-th Hessian moment.
This module computes the moments, the spectral test, the derived scalar
necessary conditions on sharpness and Hessian non-uniformity, and runs the
Monte-Carlo simulation of the linearized dynamics used to validate both.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffops import dense_hessian
from .models import ModelSpec, per_sample_family
from .params import ParamVector
from .rng import make_rng

SYMMETRY_TOL = 1e-8
LOWER_MARGIN_TOL = 1e-8
NEAR_MINIMUM_TOL = 1e-3
DEFAULT_MAX_D = 500
OVERFLOW_LIMIT = 1e250


@dataclass(frozen=True)
class HessianEnsemble:
    """n symmetric d x d per-sample Hessians at a candidate minimizer."""

    members: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.members, dtype=np.float64)
        if M.ndim != 3 or M.shape[1] != M.shape[2]:
            raise ValueError("members must be a (n, d, d) stack")
        defect = np.abs(M - np.transpose(M, (0, 2, 1))).max()
        if defect > SYMMETRY_TOL:
            raise ValueError(f"ensemble members asymmetric by {defect:.3g} > {SYMMETRY_TOL}")
        object.__setattr__(self, "members", M)

    @property
    def n(self) -> int:
        return self.members.shape[0]

    @property
    def d(self) -> int:
        return self.members.shape[1]

    def mean_hessian(self) -> np.ndarray:
        return self.members.mean(axis=0)


def _lmax(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])


def hessian_moments(e: HessianEnsemble, k: int) -> np.ndarray:
    """M_k = (1/n) sum_i H_i^k via repeated symmetric multiplication."""
    if k not in (1, 2, 3, 4):
        raise ValueError("moment order k must be in 1..4")
    P = e.members
    for _ in range(k - 1):
        P = P @ e.members
    M = P.mean(axis=0)
    return 0.5 * (M + M.T)


def nonuniformity(e: HessianEnsemble, k: int) -> float:
    """s_k^k = lambda_max(M_k - H^k); the k-th root is never taken."""
    if k not in (2, 3, 4):
        raise ValueError("non-uniformity order k must be in 2..4")
    H = e.mean_hessian()
    return _lmax(hessian_moments(e, k) - np.linalg.matrix_power(H, k))


def stability_matrix(e: HessianEnsemble, eta: float, rho: float) -> np.ndarray:
    """The matrix whose top eigenvalue decides mean-square stability."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    H = e.mean_hessian()
    H2 = H @ H
    I = np.eye(e.d)
    A = I - eta * H - eta * rho * H2
    S = (
        A @ A
        + eta * (eta - 2 * rho) * (hessian_moments(e, 2) - H2)
        + 2 * eta ** 2 * rho * (hessian_moments(e, 3) - H @ H2)
        + eta ** 2 * rho ** 2 * (hessian_moments(e, 4) - H2 @ H2)
    )
    return 0.5 * (S + S.T)


def stability_matrix_lmax(e: HessianEnsemble, eta: float, rho: float) -> float:
    return _lmax(stability_matrix(e, eta, rho))


@dataclass(frozen=True)
class ConditionCheck:
    value: float
    bound: float
    margin: float
    passed: bool
    vacuous: bool = False


@dataclass(frozen=True)
class NecessaryConditions:
    """Scalar necessary conditions for mean-square stability.

    sharpness: 0 <= a (1 + rho a) <= 2/eta with a = lambda_max(H);
    s2: 0 <= s_2^2 <= 1/(eta (eta - 2 rho)), vacuous when eta <= 2 rho;
    s3: 0 <= s_3^3 <= 1/(2 eta^2 rho), vacuous when rho = 0;
    s4: 0 <= s_4^4 <= 1/(eta^2 rho^2), vacuous when rho = 0.
    Margins are bound - value (+inf for vacuous bounds).
    """

    sharpness: ConditionCheck
    s2: ConditionCheck
    s3: ConditionCheck
    s4: ConditionCheck

    def checks(self) -> tuple[ConditionCheck, ...]:
        return (self.sharpness, self.s2, self.s3, self.s4)

    def margins(self) -> tuple[float, float, float, float]:
        return tuple(c.margin for c in self.checks())

    def all_pass(self) -> bool:
        return all(c.passed for c in self.checks())


def _condition(value: float, bound: float, vacuous: bool = False) -> ConditionCheck:
    margin = np.inf if vacuous else bound - value
    passed = value >= -LOWER_MARGIN_TOL and (vacuous or margin >= -LOWER_MARGIN_TOL)
    return ConditionCheck(value, bound, margin, passed, vacuous)


def necessary_conditions(e: HessianEnsemble, eta: float, rho: float) -> NecessaryConditions:
    if eta <= 0:
        raise ValueError("eta must be positive")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    a = _lmax(e.mean_hessian())
    s2, s3, s4 = (nonuniformity(e, k) for k in (2, 3, 4))
    s2_vac = eta <= 2 * rho
    rho_vac = rho == 0.0
    return NecessaryConditions(
        sharpness=_condition(a * (1.0 + rho * a), 2.0 / eta),
        s2=_condition(s2, np.inf if s2_vac else 1.0 / (eta * (eta - 2 * rho)), vacuous=s2_vac),
        s3=_condition(s3, np.inf if rho_vac else 1.0 / (2 * eta ** 2 * rho), vacuous=rho_vac),
        s4=_condition(s4, np.inf if rho_vac else 1.0 / (eta ** 2 * rho ** 2), vacuous=rho_vac),
    )


@dataclass(frozen=True)
class StabilityReport:
    """Spectral stability test plus the scalar necessary conditions."""

    eta: float
    rho: float
    a: float
    s2_sq: float
    s3_cu: float
    s4_qu: float
    lmax_stability: float
    eq_stability_pass: bool
    conditions: NecessaryConditions
    off_minimum: bool = False

    @property
    def conditions_pass(self) -> bool:
        return self.conditions.all_pass()

    def as_dict(self) -> dict:
        d = {
            "eta": self.eta,
            "rho": self.rho,
            "sharpness_a": self.a,
            "s2_sq": self.s2_sq,
            "s3_cu": self.s3_cu,
            "s4_qu": self.s4_qu,
            "lmax_stability": self.lmax_stability,
            "stability_pass": self.eq_stability_pass,
            "conditions_pass": self.conditions_pass,
            "off_minimum": self.off_minimum,
        }
        for name, c in zip(("sharpness", "s2", "s3", "s4"), self.conditions.checks()):
            d[f"{name}_value"] = c.value
            d[f"{name}_margin"] = None if np.isinf(c.margin) else c.margin
            d[f"{name}_pass"] = c.passed
            d[f"{name}_vacuous"] = c.vacuous
        return d


def stability_report(
    e: HessianEnsemble, eta: float, rho: float, off_minimum: bool = False
) -> StabilityReport:
    lmax = stability_matrix_lmax(e, eta, rho)
    return StabilityReport(
        eta=eta,
        rho=rho,
        a=_lmax(e.mean_hessian()),
        s2_sq=nonuniformity(e, 2),
        s3_cu=nonuniformity(e, 3),
        s4_qu=nonuniformity(e, 4),
        lmax_stability=lmax,
        eq_stability_pass=lmax <= 1.0,
        conditions=necessary_conditions(e, eta, rho),
        off_minimum=off_minimum,
    )


@dataclass
class LinearizedSamTrace:
    """Monte-Carlo estimates of E||x_t||^2 with standard errors."""

    mean_sq: np.ndarray
    stderr: np.ndarray
    trials: int
    diverged: bool = False

    @property
    def steps_completed(self) -> int:
        return len(self.mean_sq) - 1


def simulate_linearized_sam(
    e: HessianEnsemble,
    eta: float,
    rho: float,
    x0: np.ndarray,
    T: int,
    trials: int,
    seed: int,
) -> LinearizedSamTrace:
    """Simulate x' = (I - eta H_xi - eta rho H_xi^2) x with i.i.d. uniform xi.

    Each trial's index stream derives from (seed, trial), so results are
    independent of any execution interleaving; per-step statistics reduce
    over trials in fixed index order. On overflow the trace is truncated
    and flagged.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (e.d,):
        raise ValueError(f"x0 must have shape ({e.d},)")
    I = np.eye(e.d)
    ops = np.stack([I - eta * H - eta * rho * (H @ H) for H in e.members])
    xi = np.empty((trials, T), dtype=np.int64)
    for trial in range(trials):
        xi[trial] = make_rng(seed, "linearized_sam", trial).integers(0, e.n, size=T)

    X = np.tile(x0, (trials, 1))
    means = [float(x0 @ x0)]
    errs = [0.0]
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            X = np.einsum("tij,tj->ti", ops[xi[:, t]], X)
            sq = np.einsum("ti,ti->t", X, X)
            m = float(sq.mean())
            if not np.isfinite(m) or m > OVERFLOW_LIMIT:
                diverged = True
                break
            means.append(m)
            errs.append(float(sq.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0)
    return LinearizedSamTrace(np.array(means), np.array(errs), trials, diverged)


@dataclass
class EnsembleResult:
    ensemble: HessianEnsemble
    train_loss: float
    off_minimum: bool


def ensemble_from_model(
    spec: ModelSpec,
    params_at_min: ParamVector,
    data,
    max_d: int = DEFAULT_MAX_D,
    sample_indices: Sequence[int] | None = None,
    near_minimum_tol: float = NEAR_MINIMUM_TOL,
    init_params: ParamVector | None = None,
) -> EnsembleResult:
    """Dense per-sample Hessians of the squared loss at a trained point.

    Requires parameter count <= max_d. If the training loss at the point
    exceeds near_minimum_tol the analysis still runs but the result is
    flagged off-minimum.
    """
    d = len(params_at_min)
    if d > max_d:
        raise ValueError(
            f"parameter count {d} exceeds max_d={max_d}; dense per-sample "
            "Hessians are limited to small models"
        )
    X = np.asarray(data.inputs if hasattr(data, "inputs") else data[0])
    Y = data.encoded_targets() if hasattr(data, "encoded_targets") else np.asarray(data[1])
    family = per_sample_family(spec, X, Y, init_params)
    idx = range(len(family)) if sample_indices is None else sample_indices
    Hs = np.stack([dense_hessian(family[i], params_at_min) for i in idx])
    mean_loss = float(np.mean([family[i].value(params_at_min) for i in range(len(family))]))
    return EnsembleResult(
        ensemble=HessianEnsemble(Hs),
        train_loss=mean_loss,
        off_minimum=mean_loss > near_minimum_tol,
    )
