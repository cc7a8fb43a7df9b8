"""The desk-scale experiment protocols behind the CLI.

Each experiment id maps to a function that trains the relevant models for
every seed, writes run records, CSV tables, and SVG figures under the
output directory, and returns a JSON-serializable summary. Everything is
deterministic given (config, seeds); summaries carry a content hash that
excludes wall time.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import (
    Dataset,
    gen_1d_regression,
    gen_blobs_2d,
    gen_mnist_surrogate,
    gen_teacher_student,
    inject_label_noise,
    random_mask,
    snip_mask,
)
from ..landscape import TrajectoryBundle, pca_project
from ..models import (
    ModelSpec,
    count_linear_segments,
    gen_factorization_problem,
    factorization_init,
    mlp_forward,
    mlp_init,
)
from ..optim import train
from ..record import WALL_TIME_KEY, RunRecord, content_hash, save_run
from ..rng import make_rng
from ..stability import ensemble_from_model, stability_report
from .config import ExperimentConfig, build_optimizer, config_hash
from .report import export_csv, export_svg_plot

NEAR_ZERO_LOSS = 1e-3


@dataclass
class ExperimentResult:
    experiment: str
    summary: dict
    records: dict[str, RunRecord] = field(default_factory=dict)
    out_dir: Path | None = None
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Execute the named protocol for every seed and write its artifacts."""
    t0 = time.perf_counter()
    target = out_dir or cfg.out_dir
    out = Path(target) if target else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    fn = _EXPERIMENTS[cfg.experiment]
    result = fn(cfg, out)
    result.summary = {
        "experiment": cfg.experiment,
        "config_hash": config_hash(cfg),
        "config": cfg.as_dict(),
        "failures": result.failures,
        **result.summary,
    }
    result.summary[WALL_TIME_KEY] = time.perf_counter() - t0
    result.summary["content_hash"] = content_hash(result.summary)
    result.out_dir = out
    if out:
        import json

        (out / "summary.json").write_text(
            json.dumps(result.summary, sort_keys=True, indent=2, default=_json_default) + "\n"
        )
        for label, record in result.records.items():
            save_run(record, out / "runs" / label)
    return result


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON-serializable: {type(x)}")


def _steps_for(train_cfg: dict, n_train: int, batch_size: int) -> tuple[int, int]:
    """(total steps, steps per epoch) from an epochs- or steps-based config."""
    per_epoch = max(1, n_train // max(1, batch_size))
    if "steps" in train_cfg:
        return int(train_cfg["steps"]), per_epoch
    return int(train_cfg.get("epochs", 10)) * per_epoch, per_epoch


def _run_meta(cfg: ExperimentConfig, label: str, spec: ModelSpec, data_meta: dict) -> dict:
    return {
        "experiment": cfg.experiment,
        "label": label,
        "surrogate": bool(cfg.data.get("surrogate", False)),
        "model": spec_to_dict(spec),
        "data": data_meta,
    }


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "layer_widths": list(spec.layer_widths),
        "activation": spec.activation,
        "train_weights": list(spec.train_weights) if spec.train_weights else None,
        "train_biases": list(spec.train_biases) if spec.train_biases else None,
        "with_bias": list(spec.with_bias) if spec.with_bias else None,
        "centered": spec.centered,
        "alpha": spec.alpha,
        "masked": spec.mask is not None,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    if d.get("masked"):
        raise ValueError(
            "run used a pruning mask, which snapshots do not carry; "
            "post-hoc analysis of masked runs is not supported"
        )

    def _flags(v):
        return tuple(v) if v else None

    return ModelSpec(
        layer_widths=tuple(d["layer_widths"]),
        activation=d.get("activation", "relu"),
        train_weights=_flags(d.get("train_weights")),
        train_biases=_flags(d.get("train_biases")),
        with_bias=_flags(d.get("with_bias")),
        centered=d.get("centered", False),
        alpha=d.get("alpha", 1.0),
    )


# -- shared dataset builders ---------------------------------------------------


def pooled_image_features(n: int, seed: int, pooled_dim: int) -> np.ndarray:
    """Surrogate digit images average-pooled to a small feature vector and
    standardized. pooled_dim 36 crops the 2-pixel border first; 49 pools
    the full frame."""
    ds = gen_mnist_surrogate(n=n, seed=seed)
    imgs = ds.inputs.reshape(n, 28, 28)
    if pooled_dim == 36:
        imgs = imgs[:, 2:26, 2:26]
        pooled = imgs.reshape(n, 6, 4, 6, 4).mean(axis=(2, 4)).reshape(n, 36)
    elif pooled_dim == 49:
        pooled = imgs.reshape(n, 7, 4, 7, 4).mean(axis=(2, 4)).reshape(n, 49)
    else:
        raise ValueError("pooled_dim must be 36 or 49")
    return (pooled - pooled.mean()) / pooled.std()


def stability_dataset(data_cfg: dict, seed: int):
    """Pooled surrogate-digit inputs with realizable targets from a frozen
    random teacher of the same architecture family, so near-zero training
    loss is attainable inside the dense-Hessian parameter budget."""
    n = int(data_cfg.get("n", 2000))
    dim = int(data_cfg.get("pooled_dim", 36))
    teacher_h = int(data_cfg.get("teacher_hidden", 3))
    X = pooled_image_features(n, seed, dim)
    side = int(np.sqrt(dim))
    tspec = ModelSpec(layer_widths=(dim, teacher_h, 1))
    tparams = mlp_init(
        tspec, [("gauss_custom", 1.0 / side), ("gauss_custom", 1.0)], seed + 999
    )
    y = mlp_forward(tspec, tparams, X)[:, 0]
    y = y / max(y.std(), 1e-9)
    meta = {"loader": "stability_pooled", "n": n, "pooled_dim": dim,
            "teacher_hidden": teacher_h, "seed": seed}
    return X, y, meta


def classification_sets(data_cfg: dict, seed: int):
    """Pooled surrogate-digit classification train/test split."""
    n = int(data_cfg.get("n", 1000))
    n_test = int(data_cfg.get("n_test", 400))
    dim = int(data_cfg.get("pooled_dim", 49))
    X = pooled_image_features(n + n_test, seed, dim)
    full = gen_mnist_surrogate(n=n + n_test, seed=seed)
    labels = full.targets
    train_ds = Dataset(X[:n], labels[:n], kind="classification", num_classes=10)
    test_ds = Dataset(X[n:], labels[n:], kind="classification", num_classes=10)
    meta = {"loader": "pooled_classification", "n": n, "n_test": n_test,
            "pooled_dim": dim, "seed": seed}
    return train_ds, test_ds, meta


def dataset_from_meta(meta: dict):
    """Rebuild the (inputs, encoded targets) a recorded run trained on."""
    loader = meta.get("loader")
    seed = int(meta.get("seed", 0))
    if loader == "stability_pooled":
        X, y, _ = stability_dataset(meta, seed)
        return X, y[:, None]
    if loader == "pooled_classification":
        train_ds, _, _ = classification_sets(meta, seed)
        return train_ds.inputs, train_ds.encoded_targets()
    if loader == "teacher_student":
        data = gen_teacher_student(
            width_teacher=int(meta["width_teacher"]), d=int(meta["input_dim"]),
            n_train=int(meta["n_train"]), n_test=int(meta["n_test"]),
            noise_sigma=float(meta["noise_sigma"]), seed=seed,
        )
        return data.train.inputs, data.train.encoded_targets()
    if loader == "1d_regression":
        ds = gen_1d_regression(n=int(meta["n"]), seed=seed,
                               noise_sigma=float(meta.get("noise_sigma", 0.1)))
        return ds.inputs, ds.encoded_targets()
    if loader == "blobs_2d":
        ds = gen_blobs_2d(n=int(meta["n"]), seed=seed,
                          num_classes=int(meta.get("num_classes", 2)))
        return ds.inputs, ds.encoded_targets()
    raise ValueError(f"cannot rebuild dataset for loader {loader!r}")


# -- teacher-student -----------------------------------------------------------


def _teacher_student_single(cfg: ExperimentConfig, seed: int, rho_override=None):
    d = cfg.data
    data = gen_teacher_student(
        width_teacher=int(d.get("width_teacher", 200)),
        d=int(d.get("input_dim", 100)),
        n_train=int(d.get("n_train", 20400)),
        n_test=int(d.get("n_test", 5100)),
        noise_sigma=float(d.get("noise_sigma", 1.0)),
        seed=seed,
    )
    width = int(cfg.model.get("width", 100))
    spec = ModelSpec(layer_widths=(data.train.inputs.shape[1], width, 1))
    batch = int(cfg.optimizer.get("batch_size", 128))
    steps, per_epoch = _steps_for(cfg.train, len(data.train), batch)
    overrides = {} if rho_override is None else {"rho": rho_override}
    opt = build_optimizer(cfg.optimizer, steps, **overrides)
    init = mlp_init(spec, ["gauss_1_over_m", ("gauss_custom", 1.0 / np.sqrt(width))], seed)
    eval_every = per_epoch * int(cfg.train.get("eval_every_epochs", 5))
    meta_data = {"loader": "teacher_student", "seed": seed,
                 "width_teacher": int(d.get("width_teacher", 200)),
                 "input_dim": int(d.get("input_dim", 100)),
                 "n_train": int(d.get("n_train", 20400)),
                 "n_test": int(d.get("n_test", 5100)),
                 "noise_sigma": float(d.get("noise_sigma", 1.0))}
    label = f"s{seed}" if rho_override is None else f"rho{rho_override:g}_s{seed}"
    record = train(
        spec, data.train, "squared", opt, steps, seed,
        init=init, val_data=data.test, val_metric="mse", eval_every=eval_every,
        config_hash=config_hash(cfg), meta=_run_meta(cfg, label, spec, meta_data),
    )
    return record, label


def _teacher_student(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    records, rows, failures = {}, [], []
    for seed in cfg.seeds:
        record, label = _teacher_student_single(cfg, seed)
        records[label] = record
        if record.diverged:
            failures.append(label)
        rows.append([seed, record.final_train_loss(), record.final_val_metric(),
                     record.diverged])
    if out:
        export_csv(rows, out / "results.csv", ["seed", "train_loss", "val_mse", "diverged"])
        first = records[f"s{cfg.seeds[0]}"]
        export_svg_plot(
            [{"label": "train loss", "x": [r.step for r in first.eval_rows],
              "y": [r.train_loss for r in first.eval_rows]},
             {"label": "val mse", "x": [r.step for r in first.eval_rows],
              "y": [r.val_metric for r in first.eval_rows]}],
            out / "figures" / "loss_curves.svg",
            xlabel="step", ylabel="loss", title="teacher-student", logy=True,
        )
    vals = [r.final_val_metric() for r in records.values() if not r.diverged]
    summary = {
        "per_seed_val_mse": {lbl: rec.final_val_metric() for lbl, rec in records.items()},
        "mean_val_mse": float(np.mean(vals)) if vals else None,
    }
    return ExperimentResult(cfg.experiment, summary, records, failures=failures)


# -- one-hidden-layer ReLU complexity -------------------------------------------


def _one_hidden_relu(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    p = cfg.params
    widths = [int(w) for w in p.get("widths", [10, 100])]
    interval = tuple(p.get("interval", [-1.0, 1.0]))
    init_scale = float(p.get("init_scale", 1.0))
    n = int(cfg.data.get("n", 8))
    data_seed = int(cfg.data.get("seed", 7))
    ds = gen_1d_regression(n=n, seed=data_seed, noise_sigma=float(cfg.data.get("noise_sigma", 0.1)))
    steps, _ = _steps_for(cfg.train, n, n)
    snapshot_every = int(cfg.train.get("snapshot_every", max(1, steps // 10)))
    records, seg_rows, failures = {}, [], []
    meta_data = {"loader": "1d_regression", "n": n, "seed": data_seed,
                 "noise_sigma": float(cfg.data.get("noise_sigma", 0.1))}

    for width in widths:
        spec = ModelSpec(layer_widths=(1, width, 1))
        for seed in cfg.seeds:
            init = mlp_init(
                spec,
                [("gauss_custom", init_scale), ("gauss_custom", init_scale / np.sqrt(width))],
                seed,
            )
            for kind in ("gd", "sam"):
                label = f"m{width}_{kind}_s{seed}"
                opt = build_optimizer(cfg.optimizer, steps, kind=kind,
                                      rho=0.0 if kind == "gd" else cfg.optimizer.get("rho", 0.3),
                                      batch_size=n)
                record = train(
                    spec, ds, "squared", opt, steps, seed, snapshot_every=snapshot_every,
                    init=init, config_hash=config_hash(cfg),
                    meta=_run_meta(cfg, label, spec, meta_data),
                )
                records[label] = record
                if record.diverged:
                    failures.append(label)
                segments = count_linear_segments(spec, record.final_params, interval)
                seg_rows.append([width, seed, kind, segments, record.final_train_loss()])

    seg_by = {}
    for width, seed, kind, segments, _ in seg_rows:
        seg_by.setdefault((width, kind), []).append(segments)
    summary = {
        "segment_counts": [
            {"width": w, "optimizer": k, "mean_segments": float(np.mean(v)),
             "per_seed": v}
            for (w, k), v in sorted(seg_by.items())
        ],
    }

    pca_rows = []
    for width in widths:
        anchor_labels = [f"m{width}_gd_s{cfg.seeds[0]}", f"m{width}_gd_s{cfg.seeds[min(1, len(cfg.seeds)-1)]}",
                         f"m{width}_sam_s{cfg.seeds[0]}"]
        anchors = [records[lbl].final_params for lbl in dict.fromkeys(anchor_labels)]
        snaps, labels = [], []
        for kind in ("gd", "sam"):
            for seed in cfg.seeds:
                lbl = f"m{width}_{kind}_s{seed}"
                for step, pvec in records[lbl].snapshots:
                    snaps.append(pvec)
                    labels.append(f"{lbl}@{step}")
        if len(anchors) >= 2:
            try:
                proj = pca_project(TrajectoryBundle(snaps, anchors, labels))
            except ValueError:
                continue
            for lbl, (c1, c2) in zip(labels, proj.coords):
                pca_rows.append([width, lbl, c1, c2])
            summary[f"pca_explained_m{width}"] = list(proj.explained)

    if out:
        export_csv(seg_rows, out / "segments.csv",
                   ["width", "seed", "optimizer", "segments", "final_loss"])
        if pca_rows:
            export_csv(pca_rows, out / "pca.csv", ["width", "snapshot", "pc1", "pc2"])
        xs = np.linspace(interval[0], interval[1], 400)
        for width in widths:
            spec = ModelSpec(layer_widths=(1, width, 1))
            series = []
            for kind in ("gd", "sam"):
                for seed in cfg.seeds:
                    rec = records[f"m{width}_{kind}_s{seed}"]
                    ys = mlp_forward(spec, rec.final_params, xs[:, None])[:, 0]
                    series.append({"label": f"{kind} s{seed}", "x": xs, "y": ys})
            series.append({"label": "data", "x": ds.inputs[:, 0], "y": ds.targets,
                           "marker": "o"})
            export_svg_plot(series, out / "figures" / f"functions_m{width}.svg",
                            xlabel="x", ylabel="f(x)", title=f"fitted functions, m={width}")
    return ExperimentResult(cfg.experiment, summary, records, failures=failures)


# -- matrix factorization --------------------------------------------------------


def factorization_batch_grads(W1, W2, XB, TB):
    """Mean gradient of ||W2 W1 x - t||^2 over a batch (analytic form)."""
    Z = XB @ W1.T
    R = Z @ W2.T - TB
    inv = 2.0 / XB.shape[0]
    return inv * (W2.T @ R.T @ XB), inv * (R.T @ Z)


def _matrix_factorization(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    p = cfg.params
    ranks = [int(r) for r in p.get("ranks", [4, 10])]
    sigma = float(p.get("init_sigma", 1.0 / np.sqrt(6)))
    epochs = int(cfg.train.get("epochs", 100))
    lr = float(cfg.optimizer.get("eta", 5e-4))
    rho = float(cfg.optimizer.get("rho", 0.01))
    B = int(cfg.optimizer.get("batch_size", 16))
    n = int(cfg.data.get("n_samples", 1000))
    loss_rows, summary_rows = [], []
    curves = {}
    for rank in ranks:
        for seed in cfg.seeds:
            problem = gen_factorization_problem(
                rank=rank, n_samples=n, out_dim=int(cfg.data.get("out_dim", 10)),
                in_dim=int(cfg.data.get("in_dim", 6)), seed=seed,
            )
            X, A = problem.samples, problem.A
            T = X @ A.T
            params = factorization_init(problem, sigma=sigma, seed=seed)
            W1, W2 = params.view("w1").copy(), params.view("w2").copy()
            rng = make_rng(seed, "mf_order")

            def full_loss():
                R = X @ (W2 @ W1).T - T
                return float(np.mean(np.sum(R * R, axis=1)))

            losses = [full_loss()]
            for _ in range(epochs):
                order = rng.permutation(n)
                for s in range(n // B):
                    idx = order[s * B:(s + 1) * B]
                    g1, g2 = factorization_batch_grads(W1, W2, X[idx], T[idx])
                    g1, g2 = factorization_batch_grads(W1 + rho * g1, W2 + rho * g2,
                                                       X[idx], T[idx])
                    W1 -= lr * g1
                    W2 -= lr * g2
                losses.append(full_loss())
            losses = np.array(losses)
            curves[(rank, seed)] = losses
            for ep, lo in enumerate(losses):
                loss_rows.append([rank, seed, ep, lo])
            r2 = _log_linear_r2(losses, lo_epoch=10)
            summary_rows.append({"rank": rank, "seed": seed,
                                 "final_loss": float(losses[-1]),
                                 "log_fit_r2": r2})
    if out:
        export_csv(loss_rows, out / "losses.csv", ["rank", "seed", "epoch", "loss"])
        series = [{"label": f"rank {rank}", "x": np.arange(epochs + 1),
                   "y": curves[(rank, cfg.seeds[0])]} for rank in ranks]
        export_svg_plot(series, out / "figures" / "convergence.svg",
                        xlabel="epoch", ylabel="training loss", logy=True,
                        title="two-factor linear network")
    return ExperimentResult(cfg.experiment, {"runs": summary_rows})


def _log_linear_r2(losses: np.ndarray, lo_epoch: int = 10) -> float:
    if len(losses) <= lo_epoch + 2:
        return 1.0  # too few epochs to measure a trend
    y = np.log(np.maximum(losses[lo_epoch:], 1e-300))
    t = np.arange(lo_epoch, lo_epoch + len(y), dtype=float)
    design = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot


# -- width generalization ---------------------------------------------------------


def _width_gen_spec(width: int) -> ModelSpec:
    # only the first-layer weights train; first-layer biases and the
    # second-layer weights stay frozen at their initialization
    return ModelSpec(
        layer_widths=(4, width, 1),
        train_weights=(True, False),
        train_biases=(False, False),
        with_bias=(True, False),
    )


def _width_gen_single(cfg: ExperimentConfig, width: int, eta: float, rho: float, seed: int):
    from ..data import gen_4d_target

    data_seed = int(cfg.data.get("seed", 11))
    train_ds, test_ds = gen_4d_target(
        n_train=int(cfg.data.get("n_train", 1000)),
        n_test=int(cfg.data.get("n_test", 5000)),
        seed=data_seed,
    )
    spec = _width_gen_spec(width)
    batch = int(cfg.optimizer.get("batch_size", 50))
    steps, per_epoch = _steps_for(cfg.train, len(train_ds), batch)
    opt = build_optimizer(cfg.optimizer, steps, kind="sam", eta=eta, rho=rho)
    init = mlp_init(spec, ["gauss_1_over_m", "gauss_unit"], seed)
    meta_data = {"loader": "4d_target", "seed": data_seed}
    label = f"m{width}_eta{eta:g}_rho{rho:g}_s{seed}"
    record = train(
        spec, train_ds, "squared", opt, steps, seed, init=init,
        val_data=test_ds, val_metric="mse",
        config_hash=config_hash(cfg), meta=_run_meta(cfg, label, spec, meta_data),
    )
    return record, label


def _width_generalization(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    p = cfg.params
    widths = [int(w) for w in p.get("widths", [10, 100, 1000])]
    eta_grid = [float(e) for e in p.get("eta_grid", [0.01, 0.001])]
    rho_grid = [float(r) for r in p.get("rho_grid", [0.1, 0.01, 0.001])]
    rows, per_width, failures = [], [], []
    for width in widths:
        cells = []
        for eta in eta_grid:
            for rho in rho_grid:
                errs = []
                for seed in cfg.seeds:
                    record, label = _width_gen_single(cfg, width, eta, rho, seed)
                    if record.diverged or record.final_val_metric() is None:
                        failures.append(label)
                        errs.append(np.inf)
                    else:
                        errs.append(record.final_val_metric())
                    rows.append([width, eta, rho, seed, errs[-1]])
                cells.append({"eta": eta, "rho": rho, "errors": errs,
                              "mean": float(np.mean(errs))})
        best = min(cells, key=lambda c: c["mean"])
        per_width.append({
            "width": width, "best_eta": best["eta"], "best_rho": best["rho"],
            "median_test_error": float(np.median(best["errors"])),
            "per_seed": best["errors"],
        })
    if out:
        export_csv(rows, out / "grid.csv", ["width", "eta", "rho", "seed", "test_mse"])
        export_csv(
            [[e["width"], e["best_eta"], e["best_rho"], e["median_test_error"]] for e in per_width],
            out / "best_by_width.csv",
            ["width", "best_eta", "best_rho", "median_test_mse"],
        )
        export_svg_plot(
            [{"label": "median test error", "x": [e["width"] for e in per_width],
              "y": [e["median_test_error"] for e in per_width], "marker": "o"}],
            out / "figures" / "test_error_vs_width.svg",
            xlabel="hidden width", ylabel="test error", logx=True, logy=True,
            title="width generalization",
        )
    return ExperimentResult(cfg.experiment, {"by_width": per_width}, failures=failures)


# -- Hessian non-uniformity at trained minima --------------------------------------


def _stability_analysis(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    p = cfg.params
    rho_grid = [float(r) for r in p.get("rho_grid", [0.01, 0.02, 0.05])]
    n_ensemble = int(p.get("ensemble_samples", 96))
    hidden = int(cfg.model.get("hidden", 10))
    report_eta = float(p.get("report_eta", cfg.optimizer.get("eta", 0.1)))
    loss_tol = float(p.get("near_zero_loss", NEAR_ZERO_LOSS))
    records, rows, per_seed, failures = {}, [], [], []

    for seed in cfg.seeds:
        X, y, meta_data = stability_dataset(cfg.data, seed)
        spec = ModelSpec(layer_widths=(X.shape[1], hidden, 1))
        steps, _ = _steps_for(cfg.train, len(X), int(cfg.optimizer.get("batch_size", 128)))
        init = mlp_init(spec, ("gauss_custom", 0.3), seed)
        trained = {}
        for kind, rho in [("sgd", 0.0)] + [("sam", r) for r in rho_grid]:
            label = f"{kind}_rho{rho:g}_s{seed}"
            opt = build_optimizer(cfg.optimizer, steps, kind=kind, rho=rho)
            record = train(spec, (X, y), "squared", opt, steps, seed, init=init,
                           config_hash=config_hash(cfg),
                           meta=_run_meta(cfg, label, spec, meta_data))
            records[label] = record
            if record.diverged:
                failures.append(label)
                continue
            trained[(kind, rho)] = record

        idx = make_rng(seed, "ensemble_subset").choice(len(X), size=n_ensemble, replace=False)

        def analyze(kind, rho, record):
            res = ensemble_from_model(spec, record.final_params, (X, y),
                                      sample_indices=idx, near_minimum_tol=loss_tol)
            rep = stability_report(res.ensemble, eta=report_eta, rho=rho,
                                   off_minimum=res.off_minimum)
            rows.append([seed, kind, rho, record.final_train_loss(), rep.a, rep.s2_sq,
                         rep.s3_cu, rep.s4_qu, rep.lmax_stability, rep.off_minimum])
            return rep

        sgd_record = trained.get(("sgd", 0.0))
        if sgd_record is None:
            continue
        sgd_rep = analyze("sgd", 0.0, sgd_record)
        sam_candidates = [(rho, rec) for (k, rho), rec in trained.items() if k == "sam"]
        reached = [(rho, rec) for rho, rec in sam_candidates
                   if rec.final_train_loss() < loss_tol]
        pool = reached or sam_candidates
        if not pool:
            continue
        sam_rho, sam_record = min(pool, key=lambda t: t[1].final_train_loss())
        sam_rep = analyze("sam", sam_rho, sam_record)
        per_seed.append({
            "seed": seed,
            "sgd_loss": sgd_record.final_train_loss(),
            "sam_loss": sam_record.final_train_loss(),
            "sam_rho": sam_rho,
            "sgd_s2_sq": sgd_rep.s2_sq,
            "sam_s2_sq": sam_rep.s2_sq,
            "sam_not_larger": bool(sam_rep.s2_sq <= sgd_rep.s2_sq),
            "sgd_sharpness": sgd_rep.a,
            "sam_sharpness": sam_rep.a,
        })

    wins = sum(1 for e in per_seed if e["sam_not_larger"])
    summary = {"per_seed": per_seed, "sam_wins": wins, "seeds": len(per_seed)}
    if out:
        export_csv(rows, out / "nonuniformity.csv",
                   ["seed", "optimizer", "rho", "train_loss", "sharpness_a", "s2_sq",
                    "s3_cu", "s4_qu", "lmax_stability", "off_minimum"])
        if per_seed:
            export_svg_plot(
                [{"label": "SGD", "x": [e["seed"] for e in per_seed],
                  "y": [e["sgd_s2_sq"] for e in per_seed], "marker": "o"},
                 {"label": "SAM", "x": [e["seed"] for e in per_seed],
                  "y": [e["sam_s2_sq"] for e in per_seed], "marker": "s"}],
                out / "figures" / "nonuniformity.svg",
                xlabel="seed", ylabel="s2^2", title="Hessian non-uniformity at minima",
            )
    return ExperimentResult(cfg.experiment, summary, records, failures=failures)


# -- rho grid search ---------------------------------------------------------------


def _rho_grid(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    from .sweep import rho_grid_search

    grid = [float(r) for r in cfg.params.get("grid", [0.01, 0.1])]
    sweep = rho_grid_search(cfg, grid)
    if out:
        export_csv(
            [[row["rho"], row["mean_metric"], row["sd_metric"],
              *row["per_seed"]] for row in sweep.table],
            out / "rho_table.csv",
            ["rho", "mean_metric", "sd_metric"] + [f"seed_{s}" for s in cfg.seeds],
        )
        finite = [r for r in sweep.table if r["mean_metric"] is not None]
        if finite:
            export_svg_plot(
                [{"label": sweep.metric_name, "x": [r["rho"] for r in finite],
                  "y": [r["mean_metric"] for r in finite], "marker": "o"}],
                out / "figures" / "metric_vs_rho.svg",
                xlabel="rho", ylabel=sweep.metric_name, logx=True,
                title=f"rho search (best {sweep.rho_star:g})",
            )
    summary = {"table": sweep.table, "rho_star": sweep.rho_star,
               "metric_name": sweep.metric_name}
    return ExperimentResult(cfg.experiment, summary, failures=sweep.failures)


# -- label noise --------------------------------------------------------------------


def _label_noise(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    rates = [float(r) for r in cfg.params.get("noise_rates", [0.0, 0.25, 0.5])]
    hidden = int(cfg.model.get("hidden", 16))
    rows, records, failures = [], {}, []
    acc = {}
    for seed in cfg.seeds:
        train_ds, test_ds, meta_data = classification_sets(cfg.data, seed)
        spec = ModelSpec(layer_widths=(train_ds.inputs.shape[1], hidden, 10))
        batch = int(cfg.optimizer.get("batch_size", 64))
        steps, per_epoch = _steps_for(cfg.train, len(train_ds), batch)
        for rate in rates:
            noisy = inject_label_noise(train_ds, rate, 10, seed=seed + 1) if rate else train_ds
            for kind in ("sgd", "sam"):
                label = f"rate{rate:g}_{kind}_s{seed}"
                opt = build_optimizer(cfg.optimizer, steps, kind=kind,
                                      rho=0.0 if kind == "sgd" else cfg.optimizer.get("rho", 0.05))
                record = train(spec, noisy, "squared", opt, steps, seed,
                               init=("gauss_custom", 0.2), val_data=test_ds,
                               val_metric="accuracy", config_hash=config_hash(cfg),
                               meta=_run_meta(cfg, label, spec, meta_data))
                records[label] = record
                if record.diverged:
                    failures.append(label)
                    continue
                acc[(rate, kind, seed)] = record.final_val_metric()
                rows.append([seed, rate, kind, record.final_train_loss(),
                             record.final_val_metric()])
    improvements = []
    for rate in rates:
        pairs = [(acc.get((rate, "sam", s)), acc.get((rate, "sgd", s)))
                 for s in cfg.seeds]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        if pairs:
            improvements.append({"rate": rate,
                                 "mean_sam_minus_sgd": float(np.mean([a - b for a, b in pairs]))})
    if out:
        export_csv(rows, out / "accuracy.csv",
                   ["seed", "noise_rate", "optimizer", "train_loss", "val_accuracy"])
        series = []
        for kind in ("sgd", "sam"):
            xs = [r for r in rates if any((r, kind, s) in acc for s in cfg.seeds)]
            ys = [float(np.mean([acc[(r, kind, s)] for s in cfg.seeds if (r, kind, s) in acc]))
                  for r in xs]
            series.append({"label": kind, "x": xs, "y": ys, "marker": "o"})
        export_svg_plot(series, out / "figures" / "accuracy_vs_noise.svg",
                        xlabel="label noise rate", ylabel="clean val accuracy",
                        title="label noise")
    return ExperimentResult(cfg.experiment, {"improvements": improvements},
                            records, failures=failures)


# -- sparsity -------------------------------------------------------------------------


def _sparsity(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    sparsities = [float(s) for s in cfg.params.get("sparsities", [0.0, 0.5, 0.9])]
    methods = list(cfg.params.get("methods", ["random", "snip"]))
    hidden = int(cfg.model.get("hidden", 64))
    rows, records, failures, acc = [], {}, [], {}
    for seed in cfg.seeds:
        train_ds, test_ds, meta_data = classification_sets(cfg.data, seed)
        dense_spec = ModelSpec(layer_widths=(train_ds.inputs.shape[1], hidden, 10))
        batch = int(cfg.optimizer.get("batch_size", 64))
        steps, _ = _steps_for(cfg.train, len(train_ds), batch)
        init = mlp_init(dense_spec, ("gauss_custom", 0.2), seed)
        saliency_batch = (train_ds.inputs[:128], train_ds.encoded_targets()[:128])
        for method in methods:
            for sparsity in sparsities:
                if sparsity == 0.0:
                    mask_bits = None
                elif method == "random":
                    mask_bits = random_mask(dense_spec.layout(), sparsity, seed).bits
                else:
                    mask_bits = snip_mask(dense_spec, init, saliency_batch, sparsity).bits
                spec = ModelSpec(layer_widths=dense_spec.layer_widths, mask=mask_bits)
                for kind in ("sgd", "sam"):
                    label = f"{method}_sp{sparsity:g}_{kind}_s{seed}"
                    opt = build_optimizer(cfg.optimizer, steps, kind=kind,
                                          rho=0.0 if kind == "sgd" else cfg.optimizer.get("rho", 0.05))
                    record = train(spec, train_ds, "squared", opt, steps, seed,
                                   init=init, val_data=test_ds, val_metric="accuracy",
                                   config_hash=config_hash(cfg),
                                   meta=_run_meta(cfg, label, spec, meta_data))
                    records[label] = record
                    if record.diverged:
                        failures.append(label)
                        continue
                    acc[(method, sparsity, kind, seed)] = record.final_val_metric()
                    rows.append([seed, method, sparsity, kind,
                                 record.final_train_loss(), record.final_val_metric()])
    improvements = []
    for method in methods:
        for sparsity in sparsities:
            pairs = [(acc.get((method, sparsity, "sam", s)), acc.get((method, sparsity, "sgd", s)))
                     for s in cfg.seeds]
            pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
            if pairs:
                improvements.append({
                    "method": method, "sparsity": sparsity,
                    "mean_sam_minus_sgd": float(np.mean([a - b for a, b in pairs])),
                })
    if out:
        export_csv(rows, out / "sparsity.csv",
                   ["seed", "method", "sparsity", "optimizer", "train_loss", "val_accuracy"])
        series = []
        for method in methods:
            xs = sparsities
            ys = []
            for sp in sparsities:
                vals = [acc[(method, sp, "sam", s)] - acc[(method, sp, "sgd", s)]
                        for s in cfg.seeds
                        if (method, sp, "sam", s) in acc and (method, sp, "sgd", s) in acc]
                ys.append(float(np.mean(vals)) if vals else np.nan)
            series.append({"label": method, "x": xs, "y": ys, "marker": "o"})
        export_svg_plot(series, out / "figures" / "improvement_vs_sparsity.svg",
                        xlabel="sparsity", ylabel="SAM - SGD accuracy",
                        title="sparse overparameterization")
    return ExperimentResult(cfg.experiment, {"improvements": improvements},
                            records, failures=failures)


# -- linearization probe ----------------------------------------------------------------


def _linearization_probe(cfg: ExperimentConfig, out: Path | None) -> ExperimentResult:
    alphas = [float(a) for a in cfg.params.get("alphas", [1.0, 10.0, 100.0])]
    hidden = cfg.model.get("hidden", [32, 32])
    hidden = [int(h) for h in (hidden if isinstance(hidden, list) else [hidden])]
    num_classes = int(cfg.data.get("num_classes", 2))
    rows, records, failures, acc = [], {}, [], {}
    for seed in cfg.seeds:
        n, n_test = int(cfg.data.get("n", 400)), int(cfg.data.get("n_test", 400))
        full = gen_blobs_2d(n=n + n_test, seed=seed, num_classes=num_classes)
        train_ds, test_ds = full.subset(range(n)), full.subset(range(n, n + n_test))
        meta_data = {"loader": "blobs_2d", "n": n, "num_classes": num_classes, "seed": seed}
        batch = int(cfg.optimizer.get("batch_size", 32))
        steps, _ = _steps_for(cfg.train, n, batch)
        init_sigma = float(cfg.model.get("init_sigma", 0.15))
        for alpha in alphas:
            spec = ModelSpec(layer_widths=(2, *hidden, num_classes), centered=True,
                             alpha=alpha)
            init = mlp_init(spec, ("gauss_custom", init_sigma), seed)
            for kind in ("sgd", "sam"):
                label = f"alpha{alpha:g}_{kind}_s{seed}"
                opt = build_optimizer(cfg.optimizer, steps, kind=kind,
                                      rho=0.0 if kind == "sgd" else cfg.optimizer.get("rho", 0.01))
                record = train(spec, train_ds, "alpha_scaled", opt, steps, seed,
                               init=init, val_data=test_ds, val_metric="accuracy",
                               config_hash=config_hash(cfg),
                               meta=_run_meta(cfg, label, spec, meta_data))
                records[label] = record
                if record.diverged:
                    failures.append(label)
                    continue
                acc[(alpha, kind, seed)] = record.final_val_metric()
                rows.append([seed, alpha, kind, record.final_train_loss(),
                             record.final_val_metric()])
    by_alpha = []
    for alpha in alphas:
        entry = {"alpha": alpha}
        for kind in ("sgd", "sam"):
            vals = [acc[(alpha, kind, s)] for s in cfg.seeds if (alpha, kind, s) in acc]
            entry[f"{kind}_accuracy"] = float(np.mean(vals)) if vals else None
        by_alpha.append(entry)
    if out:
        export_csv(rows, out / "probe.csv",
                   ["seed", "alpha", "optimizer", "train_loss", "val_accuracy"])
        series = [
            {"label": kind,
             "x": [e["alpha"] for e in by_alpha],
             "y": [e[f"{kind}_accuracy"] for e in by_alpha], "marker": "o"}
            for kind in ("sgd", "sam")
        ]
        export_svg_plot(series, out / "figures" / "accuracy_vs_alpha.svg",
                        xlabel="output scale alpha", ylabel="val accuracy",
                        logx=True, title="scaled-loss linearization probe")
    return ExperimentResult(cfg.experiment, {"by_alpha": by_alpha}, records,
                            failures=failures)


_EXPERIMENTS = {
    "teacher_student": _teacher_student,
    "one_hidden_relu": _one_hidden_relu,
    "matrix_factorization": _matrix_factorization,
    "width_generalization": _width_generalization,
    "stability_analysis": _stability_analysis,
    "rho_grid": _rho_grid,
    "label_noise": _label_noise,
    "sparsity": _sparsity,
    "linearization_probe": _linearization_probe,
}
