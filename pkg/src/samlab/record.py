"""Run records: per-step traces, snapshots, and deterministic serialization.

A RunRecord captures one training trajectory. Serialization is split into a
summary JSON (canonical key order, content hash excluding wall time), a
per-step CSV trace, a per-evaluation CSV, and .npy parameter snapshots, so
that reruns with the same config and seed produce byte-identical artifacts
except for the wall-time field.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import ParamLayout, ParamVector

WALL_TIME_KEY = "wall_time_s"


@dataclass
class StepRow:
    step: int
    eta: float
    loss: float
    grad_norm: float


@dataclass
class EvalRow:
    step: int
    train_loss: float
    val_metric: float | None = None
    sharpness: float | None = None


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    steps: int
    step_rows: list[StepRow] = field(default_factory=list)
    eval_rows: list[EvalRow] = field(default_factory=list)
    snapshots: list[tuple[int, ParamVector]] = field(default_factory=list)
    final_params: ParamVector | None = None
    diverged: bool = False
    zero_grad_steps: int = 0
    wall_time_s: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = [r.step for r in self.step_rows]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("step rows must be strictly increasing in step")

    def final_train_loss(self) -> float | None:
        return self.eval_rows[-1].train_loss if self.eval_rows else None

    def final_val_metric(self) -> float | None:
        for row in reversed(self.eval_rows):
            if row.val_metric is not None:
                return row.val_metric
        return None

    def snapshot_params(self) -> list[ParamVector]:
        return [p for _, p in self.snapshots]


def _float_cell(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _layout_json(layout: ParamLayout) -> list[list]:
    return [[e.name, list(e.shape)] for e in layout.entries]


def _layout_from_json(obj) -> ParamLayout:
    return ParamLayout.from_shapes([(name, tuple(shape)) for name, shape in obj])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(summary: dict) -> str:
    """Hash of the summary with volatile fields removed."""
    clean = {k: v for k, v in summary.items() if k not in (WALL_TIME_KEY, "content_hash")}
    return hashlib.sha256(canonical_json(clean).encode("utf-8")).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def run_summary(record: RunRecord) -> dict:
    summary = {
        "config_hash": record.config_hash,
        "seed": record.seed,
        "steps": record.steps,
        "diverged": record.diverged,
        "zero_grad_steps": record.zero_grad_steps,
        "final_train_loss": record.final_train_loss(),
        "final_val_metric": record.final_val_metric(),
        "n_step_rows": len(record.step_rows),
        "n_snapshots": len(record.snapshots),
        "snapshot_steps": [s for s, _ in record.snapshots],
        "meta": _jsonable(record.meta),
        WALL_TIME_KEY: record.wall_time_s,
    }
    if record.final_params is not None:
        summary["layout"] = _layout_json(record.final_params.layout)
        summary["param_count"] = len(record.final_params)
    summary["content_hash"] = content_hash(summary)
    return summary


def save_run(record: RunRecord, out_dir: str | Path) -> Path:
    """Write summary.json, trace.csv, eval.csv, and snapshots/*.npy."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = run_summary(record)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")

    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "eta", "loss", "grad_norm"])
        for r in record.step_rows:
            writer.writerow([r.step, _float_cell(r.eta), _float_cell(r.loss), _float_cell(r.grad_norm)])

    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_metric", "sharpness"])
        for r in record.eval_rows:
            writer.writerow(
                [r.step, _float_cell(r.train_loss), _float_cell(r.val_metric), _float_cell(r.sharpness)]
            )

    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for step, pv in record.snapshots:
        np.save(snap_dir / f"step_{step:08d}.npy", pv.data)
    if record.final_params is not None:
        np.save(snap_dir / "final.npy", record.final_params.data)
    return out


def load_run(run_dir: str | Path) -> RunRecord:
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    layout = _layout_from_json(summary["layout"]) if "layout" in summary else None

    step_rows: list[StepRow] = []
    with open(run_dir / "trace.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            step_rows.append(
                StepRow(int(row["step"]), float(row["eta"]), float(row["loss"]), float(row["grad_norm"]))
            )
    eval_rows: list[EvalRow] = []
    with open(run_dir / "eval.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            eval_rows.append(
                EvalRow(
                    int(row["step"]),
                    float(row["train_loss"]),
                    float(row["val_metric"]) if row["val_metric"] else None,
                    float(row["sharpness"]) if row["sharpness"] else None,
                )
            )

    snapshots: list[tuple[int, ParamVector]] = []
    final_params = None
    if layout is not None:
        for step in summary.get("snapshot_steps", []):
            data = np.load(run_dir / "snapshots" / f"step_{step:08d}.npy")
            snapshots.append((step, ParamVector(data, layout, check_finite=False)))
        final_path = run_dir / "snapshots" / "final.npy"
        if final_path.exists():
            final_params = ParamVector(np.load(final_path), layout, check_finite=False)

    return RunRecord(
        config_hash=summary["config_hash"],
        seed=summary["seed"],
        steps=summary["steps"],
        step_rows=step_rows,
        eval_rows=eval_rows,
        snapshots=snapshots,
        final_params=final_params,
        diverged=summary["diverged"],
        zero_grad_steps=summary.get("zero_grad_steps", 0),
        wall_time_s=summary.get(WALL_TIME_KEY, 0.0),
        meta=summary.get("meta", {}),
    )
