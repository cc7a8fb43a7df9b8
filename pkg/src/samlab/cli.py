"""Command-line interface.

Subcommands: run (execute an experiment config), sweep (rho grid search),
stability (spectral stability report from a recorded run), analyze
(segment counts / PCA / smoothness-PL traces from stored snapshots),
gen-data (write datasets), version. Outputs are deterministic given
(config, seed); summary JSON excludes wall time from its content hash.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    gen_1d_regression,
    gen_blobs_2d,
    gen_4d_target,
    gen_teacher_student,
    save_dataset,
    write_mnist_surrogate_idx,
)
from .landscape import TrajectoryBundle, empirical_alpha, empirical_beta, pca_project
from .models import count_linear_segments, squared_loss_fn
from .record import load_run
from .stability import ensemble_from_model, stability_report
from .harness.config import ConfigError, load_config
from .harness.experiments import dataset_from_meta, run_experiment, spec_from_dict
from .harness.report import export_csv
from .rng import make_rng


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samlab",
                                     description="sharpness-aware optimization lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)

    p_sweep = sub.add_parser("sweep", help="rho grid search over a base experiment")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default=None)

    p_stab = sub.add_parser("stability", help="stability report from a recorded run")
    p_stab.add_argument("--record", required=True)
    p_stab.add_argument("--eta", type=float, default=None)
    p_stab.add_argument("--rho", type=float, default=0.0)
    p_stab.add_argument("--samples", type=int, default=64)
    p_stab.add_argument("--out", default=None)

    p_an = sub.add_parser("analyze", help="post-hoc analysis of stored snapshots")
    p_an.add_argument("--record", required=True)
    p_an.add_argument("--kind", required=True, choices=("segments", "pca", "beta-alpha"))
    p_an.add_argument("--anchors", nargs="*", default=[],
                      help="extra run dirs whose final params anchor the PCA")
    p_an.add_argument("--interval", nargs=2, type=float, default=(-1.0, 1.0))
    p_an.add_argument("--f-star", type=float, default=0.0)
    p_an.add_argument("--out", default=None)

    p_gen = sub.add_parser("gen-data", help="write a dataset to disk")
    p_gen.add_argument("--kind", required=True,
                       choices=("teacher_student", "sinusoid4d", "one_d", "blobs",
                                "mnist_surrogate"))
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--n", type=int, default=None)

    sub.add_parser("version", help="print the semantic version")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg, out_dir=args.out)
    where = f" -> {result.out_dir}" if result.out_dir else ""
    print(f"{cfg.experiment}: {'ok' if result.ok else 'FAILURES'}{where}")
    for failure in result.failures:
        print(f"  failed: {failure}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if cfg.experiment != "rho_grid":
        base = cfg.as_dict()
        params = base.setdefault("params", {})
        params.setdefault("base_experiment", cfg.experiment)
        params.setdefault("grid", [cfg.optimizer.get("rho", 0.05)])
        base["experiment"] = "rho_grid"
        from .harness.config import validate_config

        cfg = validate_config(base)
    result = run_experiment(cfg, out_dir=args.out)
    print(f"rho_star={result.summary['rho_star']}")
    for row in result.summary["table"]:
        mean = row["mean_metric"]
        print(f"  rho={row['rho']:g} metric={mean if mean is not None else 'missing'} "
              f"({row['completed']}/{len(cfg.seeds)} cells)")
    return 0 if result.ok else 1


def _cmd_stability(args) -> int:
    record = load_run(args.record)
    meta = record.meta
    if "model" not in meta or "data" not in meta:
        print("record carries no model/data provenance; cannot rebuild the objective",
              file=sys.stderr)
        return 1
    spec = spec_from_dict(meta["model"])
    X, Y = dataset_from_meta(meta["data"])
    n = min(args.samples, X.shape[0])
    idx = make_rng(record.seed, "cli_stability").choice(X.shape[0], size=n, replace=False)
    result = ensemble_from_model(spec, record.final_params, (X, Y), sample_indices=idx)
    eta = args.eta if args.eta is not None else 0.1
    report = stability_report(result.ensemble, eta=eta, rho=args.rho,
                              off_minimum=result.off_minimum)
    payload = report.as_dict()
    payload["train_loss"] = result.train_loss
    print(json.dumps(payload, sort_keys=True, indent=2))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _cmd_analyze(args) -> int:
    record = load_run(args.record)
    meta = record.meta
    if "model" not in meta:
        print("record carries no model provenance", file=sys.stderr)
        return 1
    spec = spec_from_dict(meta["model"])

    if args.kind == "segments":
        count = count_linear_segments(spec, record.final_params, tuple(args.interval))
        print(json.dumps({"segments": count, "interval": list(args.interval)}))
        return 0

    if args.kind == "pca":
        anchors = [record.final_params]
        for other in args.anchors:
            anchors.append(load_run(other).final_params)
        if len(anchors) < 2:
            print("PCA needs at least 2 anchors; pass --anchors run dirs", file=sys.stderr)
            return 1
        snaps = [p for _, p in record.snapshots]
        labels = [f"step{s}" for s, _ in record.snapshots]
        proj = pca_project(TrajectoryBundle(snaps, anchors, labels))
        rows = [[lbl, c1, c2] for lbl, (c1, c2) in zip(labels, proj.coords)]
        out = Path(args.out) if args.out else Path(args.record) / "pca.csv"
        export_csv(rows, out, ["snapshot", "pc1", "pc2"])
        print(json.dumps({"explained": list(proj.explained), "csv": str(out)}))
        return 0

    # beta-alpha trace over consecutive snapshots
    if "data" not in meta:
        print("record carries no data provenance", file=sys.stderr)
        return 1
    X, Y = dataset_from_meta(meta["data"])
    fn = squared_loss_fn(spec, X, Y)
    snaps = record.snapshots
    if len(snaps) < 2:
        print("need at least 2 snapshots for the segment estimators", file=sys.stderr)
        return 1
    rows = []
    for (s0, p0), (s1, p1) in zip(snaps, snaps[1:]):
        if np.array_equal(p0.data, p1.data):
            continue
        beta = empirical_beta(fn, p0, p1)
        try:
            alpha = empirical_alpha(fn, p0, p1, f_star=args.f_star)
        except ValueError:
            alpha = None
        rows.append([s0, s1, beta, alpha])
    out = Path(args.out) if args.out else Path(args.record) / "beta_alpha.csv"
    export_csv(rows, out, ["step_from", "step_to", "beta_hat", "alpha_hat"])
    print(json.dumps({"rows": len(rows), "csv": str(out)}))
    return 0


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.kind == "mnist_surrogate":
        paths = write_mnist_surrogate_idx(out, n_train=args.n or 2000, seed=args.seed)
        print(json.dumps(paths, sort_keys=True, indent=2))
        return 0
    if args.kind == "teacher_student":
        data = gen_teacher_student(n_train=args.n or 20400, seed=args.seed)
        save_dataset(data.train, out / "train")
        save_dataset(data.test, out / "test")
    elif args.kind == "sinusoid4d":
        train, test = gen_4d_target(n_train=args.n or 1000, seed=args.seed)
        save_dataset(train, out / "train")
        save_dataset(test, out / "test")
    elif args.kind == "one_d":
        save_dataset(gen_1d_regression(n=args.n or 8, seed=args.seed), out / "train")
    elif args.kind == "blobs":
        save_dataset(gen_blobs_2d(n=args.n or 400, seed=args.seed), out / "train")
    print(str(out))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "version":
        print(f"samlab {__version__}")
        return 0
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "stability":
            return _cmd_stability(args)
        if args.command == "analyze":
            return _cmd_analyze(args)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
    except ConfigError as err:
        print(f"config error at {err.path}: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, NotImplementedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
