"""Perturbation-radius grid search.

Runs the configured base experiment once per (rho, seed) cell, aggregates
an oriented validation metric (higher is better), and reports the best
rho with ties broken toward the smaller value. Cells run as independent
jobs on a bounded worker pool (SAMLAB_WORKERS, default 1); aggregation is
single-threaded and ordered by (rho, seed), so results do not depend on
execution interleaving. Failed cells are reported missing and excluded.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ExperimentConfig, validate_config

SWEEPABLE_BASES = ("teacher_student",)


@dataclass
class SweepResult:
    table: list[dict]
    rho_star: float | None
    metric_name: str
    failures: list[str] = field(default_factory=list)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SAMLAB_WORKERS", "1")))
    except ValueError:
        return 1


def _run_cell(args: tuple[dict, float, int]) -> tuple[float, int, float | None, str | None]:
    cfg_dict, rho, seed = args
    cfg = validate_config(cfg_dict)
    from .experiments import _teacher_student_single

    try:
        record, label = _teacher_student_single(cfg, seed, rho_override=rho)
    except Exception as err:  # cell failures propagate as missing cells
        return rho, seed, None, f"rho={rho:g} seed={seed}: {err}"
    if record.diverged or record.final_val_metric() is None:
        return rho, seed, None, f"rho={rho:g} seed={seed}: diverged"
    return rho, seed, -float(record.final_val_metric()), None


def rho_grid_search(cfg: ExperimentConfig, grid: list[float]) -> SweepResult:
    """Run the base experiment per rho per seed; best rho by mean metric."""
    if not grid:
        raise ValueError("rho grid must be non-empty")
    base = cfg.params.get("base_experiment", "teacher_student")
    if base not in SWEEPABLE_BASES:
        raise ConfigError("params.base_experiment", f"must be one of {SWEEPABLE_BASES}")
    grid = sorted(float(r) for r in grid)
    base_dict = cfg.as_dict()
    base_dict["experiment"] = base
    base_dict.setdefault("params", {}).pop("grid", None)
    base_dict["params"].pop("base_experiment", None)
    jobs = [(base_dict, rho, seed) for rho in grid for seed in cfg.seeds]

    workers = _worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(job) for job in jobs]

    by_cell = {(rho, seed): (metric, err) for rho, seed, metric, err in outcomes}
    failures = [err for _, _, _, err in sorted(outcomes, key=lambda o: (o[0], o[1])) if err]

    table: list[dict] = []
    best_rho, best_mean = None, -np.inf
    for rho in grid:
        metrics = [by_cell[(rho, seed)][0] for seed in cfg.seeds]
        done = [m for m in metrics if m is not None]
        mean = float(np.mean(done)) if done else None
        sd = float(np.std(done, ddof=1)) if len(done) > 1 else 0.0
        table.append({
            "rho": rho,
            "mean_metric": mean,
            "sd_metric": sd if done else None,
            "per_seed": metrics,
            "completed": len(done),
        })
        if mean is not None and mean > best_mean:
            best_rho, best_mean = rho, mean
    return SweepResult(table=table, rho_star=best_rho, metric_name="neg_val_mse",
                       failures=failures)
