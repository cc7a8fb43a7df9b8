"""Experiment configs: JSON schema validation and golden presets.

Configs are plain JSON with an ``experiment`` id, a non-empty ``seeds``
list, optimizer/data/train sub-configs, and experiment-specific
``params``. Validation errors carry the dotted field path. Desk-scale
presets that stand in for larger workloads are labeled by a "surrogate"
flag in their data section and echoed into output metadata.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..optim import OPTIMIZER_KINDS, RESERVED_OPTIMIZER_KINDS, SCHEDULE_KINDS, OptimizerConfig, Schedule
from ..record import canonical_json

EXPERIMENT_IDS = (
    "teacher_student",
    "one_hidden_relu",
    "matrix_factorization",
    "width_generalization",
    "stability_analysis",
    "rho_grid",
    "label_noise",
    "sparsity",
    "linearization_probe",
)

_TOP_KEYS = {"experiment", "seeds", "out_dir", "optimizer", "model", "data", "train", "params"}
_OPT_KEYS = {"kind", "eta", "rho", "normalized", "momentum", "batch_size", "schedule"}
_SCHED_KEYS = {"kind", "decay", "milestone_fracs"}


class ConfigError(ValueError):
    """Config schema violation with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list[int]
    optimizer: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    out_dir: str | None = None

    def as_dict(self) -> dict:
        # deep copy: callers mutate the result (and it feeds the config hash)
        return json.loads(json.dumps({
            "experiment": self.experiment,
            "seeds": list(self.seeds),
            "optimizer": self.optimizer,
            "model": self.model,
            "data": self.data,
            "train": self.train,
            "params": self.params,
        }))

    def with_overrides(self, **section_updates) -> "ExperimentConfig":
        obj = json.loads(json.dumps(self.as_dict()))
        for section, update in section_updates.items():
            if isinstance(update, dict):
                obj.setdefault(section, {}).update(update)
            else:
                obj[section] = update
        return validate_config(obj)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.as_dict()).encode("utf-8")).hexdigest()[:16]


def _check_type(value, types, path: str, what: str):
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        raise ConfigError(path, f"expected {what}")
    return value


def _number(obj, key, path, default=None, minimum=None, maximum=None):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing required number")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", "expected a number")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}.{key}", f"must be >= {minimum}")
    if maximum is not None and v > maximum:
        raise ConfigError(f"{path}.{key}", f"must be <= {maximum}")
    return v


def validate_optimizer(obj: dict, path: str = "optimizer") -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    unknown = set(obj) - _OPT_KEYS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kind = obj.get("kind", "sgd")
    if kind in RESERVED_OPTIMIZER_KINDS:
        raise ConfigError(
            f"{path}.kind", f"{kind!r} is reserved in the schema but not implemented"
        )
    if kind not in OPTIMIZER_KINDS:
        raise ConfigError(f"{path}.kind", f"must be one of {OPTIMIZER_KINDS}")
    _number(obj, "eta", path, default=0.1, minimum=1e-300)
    _number(obj, "rho", path, default=0.0, minimum=0.0)
    _number(obj, "momentum", path, default=0.0, minimum=0.0, maximum=0.999)
    _number(obj, "batch_size", path, default=1, minimum=1)
    if "normalized" in obj and not isinstance(obj["normalized"], bool):
        raise ConfigError(f"{path}.normalized", "expected a boolean")
    sched = obj.get("schedule", {"kind": "constant"})
    if not isinstance(sched, dict):
        raise ConfigError(f"{path}.schedule", "expected an object")
    unknown = set(sched) - _SCHED_KEYS
    if unknown:
        raise ConfigError(f"{path}.schedule.{sorted(unknown)[0]}", "unknown field")
    if sched.get("kind", "constant") not in SCHEDULE_KINDS:
        raise ConfigError(f"{path}.schedule.kind", f"must be one of {SCHEDULE_KINDS}")
    fracs = sched.get("milestone_fracs", [])
    if not isinstance(fracs, list) or any(
        isinstance(f, bool) or not isinstance(f, (int, float)) or not 0 < f < 1 for f in fracs
    ):
        raise ConfigError(f"{path}.schedule.milestone_fracs", "expected fractions in (0, 1)")
    if any(b <= a for a, b in zip(fracs, fracs[1:])):
        raise ConfigError(f"{path}.schedule.milestone_fracs", "must be strictly increasing")
    return obj


def build_optimizer(opt: dict, total_steps: int, **overrides) -> OptimizerConfig:
    """Materialize an OptimizerConfig, resolving milestone fractions."""
    merged = dict(opt)
    merged.update(overrides)
    sched_spec = merged.pop("schedule", {"kind": "constant"})
    kind = sched_spec.get("kind", "constant")
    if kind == "step":
        schedule = Schedule.step_at_fractions(
            sched_spec.get("milestone_fracs", [0.5, 0.75]), total_steps,
            decay=sched_spec.get("decay", 0.1),
        )
    else:
        schedule = Schedule(kind=kind, decay=sched_spec.get("decay", 0.1))
    return OptimizerConfig(
        kind=merged.get("kind", "sgd"),
        eta=merged.get("eta", 0.1),
        rho=merged.get("rho", 0.0),
        normalized=merged.get("normalized", True),
        momentum=merged.get("momentum", 0.0),
        batch_size=int(merged.get("batch_size", 1)),
        schedule=schedule,
    )


def validate_config(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("$", "config root must be an object")
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    if "experiment" not in obj:
        raise ConfigError("experiment", "missing required field")
    if obj["experiment"] not in EXPERIMENT_IDS:
        raise ConfigError("experiment", f"must be one of {EXPERIMENT_IDS}")
    seeds = obj.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "expected a non-empty list of integers")
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int):
            raise ConfigError(f"seeds[{i}]", "expected an integer")
    for section in ("model", "data", "train", "params"):
        if section in obj and not isinstance(obj[section], dict):
            raise ConfigError(section, "expected an object")
    optimizer = validate_optimizer(obj.get("optimizer", {}))
    out_dir = obj.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir", "expected a string path")
    return ExperimentConfig(
        experiment=obj["experiment"],
        seeds=list(seeds),
        optimizer=optimizer,
        model=obj.get("model", {}),
        data=obj.get("data", {}),
        train=obj.get("train", {}),
        params=obj.get("params", {}),
        out_dir=out_dir,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("$", f"invalid JSON: {err}") from err
    return validate_config(obj)


# -- presets -------------------------------------------------------------------
#
# Golden configs are small fixtures, one per experiment id, used for smoke
# runs and the determinism check; each finishes in well under a minute.
# Acceptance configs pin the full desk-scale protocols behind the heavier
# verification runs. Desk-scale stand-ins for larger workloads set
# data.surrogate = true; that flag is copied into all output metadata.

GOLDEN_CONFIGS: dict[str, dict] = {
    "teacher_student": {
        "experiment": "teacher_student",
        "seeds": [0, 1],
        "optimizer": {"kind": "sam", "eta": 0.1, "rho": 0.05, "normalized": True,
                      "batch_size": 128, "schedule": {"kind": "step", "decay": 0.1,
                                                      "milestone_fracs": [0.5, 0.75]}},
        "model": {"width": 100},
        "data": {"width_teacher": 200, "input_dim": 100, "n_train": 512, "n_test": 256,
                 "noise_sigma": 1.0, "surrogate": True},
        "train": {"epochs": 8, "eval_every_epochs": 4},
    },
    "one_hidden_relu": {
        "experiment": "one_hidden_relu",
        "seeds": [0, 1],
        "optimizer": {"kind": "sam", "eta": 0.02, "rho": 0.3, "normalized": True},
        "data": {"n": 8, "noise_sigma": 0.1},
        "train": {"steps": 2500, "snapshot_every": 500},
        "params": {"widths": [10, 30], "init_scale": 1.0, "interval": [-1.0, 1.0]},
    },
    "matrix_factorization": {
        "experiment": "matrix_factorization",
        "seeds": [0, 1, 2],
        "optimizer": {"kind": "sam", "eta": 0.0005, "rho": 0.01, "normalized": False,
                      "batch_size": 16},
        "data": {"n_samples": 1000, "out_dim": 10, "in_dim": 6},
        "train": {"epochs": 100},
        "params": {"ranks": [4, 10], "init_sigma": 0.40824829046386296},
    },
    "width_generalization": {
        "experiment": "width_generalization",
        "seeds": [0],
        "optimizer": {"kind": "sam", "normalized": True, "batch_size": 50,
                      "schedule": {"kind": "step", "decay": 0.1, "milestone_fracs": [0.5]}},
        "data": {"n_train": 400, "n_test": 1000},
        "train": {"epochs": 20},
        "params": {"widths": [10, 100], "eta_grid": [0.01], "rho_grid": [0.1, 0.01]},
    },
    "stability_analysis": {
        "experiment": "stability_analysis",
        "seeds": [0],
        "optimizer": {"kind": "sgd", "eta": 0.08, "batch_size": 128,
                      "schedule": {"kind": "step", "decay": 0.3,
                                   "milestone_fracs": [0.55, 0.8]}},
        "model": {"hidden": 10},
        "data": {"n": 500, "pooled_dim": 36, "teacher_hidden": 3, "surrogate": True},
        "train": {"steps": 6000},
        "params": {"rho_grid": [0.01, 0.02], "ensemble_samples": 16,
                   "report_eta": 0.08, "near_zero_loss": 0.05},
    },
    "rho_grid": {
        "experiment": "rho_grid",
        "seeds": [0, 1],
        "optimizer": {"kind": "sam", "eta": 0.1, "normalized": True, "batch_size": 128,
                      "schedule": {"kind": "step", "decay": 0.1,
                                   "milestone_fracs": [0.5, 0.75]}},
        "model": {"width": 50},
        "data": {"width_teacher": 200, "input_dim": 100, "n_train": 512, "n_test": 256,
                 "noise_sigma": 1.0, "surrogate": True},
        "train": {"epochs": 6},
        "params": {"base_experiment": "teacher_student", "grid": [0.001, 0.01, 0.1]},
    },
    "label_noise": {
        "experiment": "label_noise",
        "seeds": [0],
        "optimizer": {"kind": "sam", "eta": 0.05, "rho": 0.05, "normalized": True,
                      "batch_size": 64},
        "model": {"hidden": 16},
        "data": {"n": 500, "n_test": 250, "pooled_dim": 49, "surrogate": True},
        "train": {"epochs": 15},
        "params": {"noise_rates": [0.0, 0.5]},
    },
    "sparsity": {
        "experiment": "sparsity",
        "seeds": [0],
        "optimizer": {"kind": "sam", "eta": 0.05, "rho": 0.05, "normalized": True,
                      "batch_size": 64},
        "model": {"hidden": 32},
        "data": {"n": 500, "n_test": 250, "pooled_dim": 49, "surrogate": True},
        "train": {"epochs": 12},
        "params": {"sparsities": [0.0, 0.5], "methods": ["random", "snip"]},
    },
    "linearization_probe": {
        "experiment": "linearization_probe",
        "seeds": [0],
        "optimizer": {"kind": "sam", "eta": 0.02, "rho": 0.01, "normalized": True,
                      "batch_size": 32},
        "model": {"hidden": [32, 32], "init_sigma": 0.15},
        "data": {"n": 200, "n_test": 200, "num_classes": 2, "surrogate": True},
        "train": {"epochs": 60},
        "params": {"alphas": [1.0, 100.0]},
    },
}

# Full desk-scale protocols used by the verification suite; these take
# minutes each and pin every hyperparameter the checks depend on.
ACCEPTANCE_CONFIGS: dict[str, dict] = {
    "matrix_factorization": GOLDEN_CONFIGS["matrix_factorization"],
    "one_hidden_relu": {
        "experiment": "one_hidden_relu",
        "seeds": [0, 1, 2],
        "optimizer": {"kind": "sam", "eta": 0.02, "rho": 0.3, "normalized": True},
        "data": {"n": 8, "noise_sigma": 0.1},
        "train": {"steps": 15000, "snapshot_every": 1500},
        "params": {"widths": [10, 100], "init_scale": 1.0, "interval": [-1.0, 1.0]},
    },
    "width_generalization": {
        "experiment": "width_generalization",
        "seeds": [0, 1, 2],
        "optimizer": {"kind": "sam", "normalized": True, "batch_size": 50,
                      "schedule": {"kind": "step", "decay": 0.1, "milestone_fracs": [0.5]}},
        "data": {"n_train": 1000, "n_test": 5000},
        "train": {"epochs": 120},
        "params": {"widths": [10, 50, 100, 500, 1000],
                   "eta_grid": [0.01, 0.001], "rho_grid": [0.1, 0.01, 0.001]},
    },
    "stability_analysis": {
        "experiment": "stability_analysis",
        "seeds": [0, 1, 2],
        "optimizer": {"kind": "sgd", "eta": 0.08, "batch_size": 128,
                      "schedule": {"kind": "step", "decay": 0.3,
                                   "milestone_fracs": [0.55, 0.8]}},
        "model": {"hidden": 10},
        "data": {"n": 2000, "pooled_dim": 36, "teacher_hidden": 3, "surrogate": True},
        "train": {"steps": 45000},
        "params": {"rho_grid": [0.01, 0.02, 0.05], "ensemble_samples": 64,
                   "report_eta": 0.08},
    },
    "rho_grid": {
        "experiment": "rho_grid",
        "seeds": [0, 1, 2],
        "optimizer": {"kind": "sam", "eta": 0.1, "normalized": True, "batch_size": 128,
                      "schedule": {"kind": "step", "decay": 0.1,
                                   "milestone_fracs": [0.5, 0.75]}},
        "model": {"width": 100},
        "data": {"width_teacher": 200, "input_dim": 100, "n_train": 2048, "n_test": 512,
                 "noise_sigma": 1.0, "surrogate": True},
        "train": {"epochs": 30},
        "params": {"base_experiment": "teacher_student",
                   "grid": [0.001, 0.01, 0.05, 0.07, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 2.0]},
    },
}


def golden_config(experiment: str) -> ExperimentConfig:
    if experiment not in GOLDEN_CONFIGS:
        raise KeyError(f"no golden config for {experiment!r}")
    return validate_config(json.loads(json.dumps(GOLDEN_CONFIGS[experiment])))


def acceptance_config(experiment: str) -> ExperimentConfig:
    if experiment not in ACCEPTANCE_CONFIGS:
        raise KeyError(f"no acceptance config for {experiment!r}")
    return validate_config(json.loads(json.dumps(ACCEPTANCE_CONFIGS[experiment])))


def write_preset_configs(root: str | Path) -> list[Path]:
    """Write configs/golden/*.json and configs/acceptance/*.json fixtures."""
    root = Path(root)
    paths = []
    for sub, presets in (("golden", GOLDEN_CONFIGS), ("acceptance", ACCEPTANCE_CONFIGS)):
        out = root / sub
        out.mkdir(parents=True, exist_ok=True)
        for name, obj in presets.items():
            p = out / f"{name}.json"
            p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
            paths.append(p)
    return paths
