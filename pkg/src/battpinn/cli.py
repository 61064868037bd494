"""Command-line entry point: ``battpinn <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import data, harness, pinn, synth


def _read_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise data.DataError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, default=str))


def cmd_ingest(args) -> int:
    sources = []
    for src in args.src:
        p = Path(src)
        sources += sorted(p.glob("*.mat")) if p.is_dir() else [p]
    if not sources:
        raise data.DataError("no .mat batch files found")
    cells = data.ingest_mat_batches(sources, args.out, q_nom=args.q_nom, clean=not args.no_clean)
    print(f"ingested {len(cells)} cells into {args.out}")
    return 0


def cmd_simulate(args) -> int:
    """Config keys: generator, params, u0, cells, layout, heterogeneity, noise_std, seed,
    n_cycles, truncate_at_eol, feature_noise_std, raw."""
    cfg = _read_config(args.cfg)
    spec = synth.GeneratorSpec(cfg.get("generator", "logistic"),
                               cfg.get("params", synth.GeneratorSpec().params),
                               cfg.get("u0", 0.10))
    out = Path(args.out)
    if cfg.get("layout") == "paper":
        cells, batches = synth.paper_layout_cells()
    else:
        cells = cfg.get("cells", 3)
        batches = cfg.get("batch", 1)
        if not isinstance(cells, int) and isinstance(batches, int):
            batches = [batches] * len(cells)
    if cfg.get("raw", False):
        if isinstance(cells, int):
            cells = [f"sim{i + 1:03d}" for i in range(cells)]
            batches = [batches] * len(cells) if isinstance(batches, int) else batches
        truth = synth.write_raw_dataset(out, cells, batches, spec, cfg.get("heterogeneity", 0.0),
                                        cfg.get("seed", 0), n_points=cfg.get("n_points", 100))
    else:
        table, truth = synth.generate_dataset(
            spec, cells, cfg.get("heterogeneity", 0.0), cfg.get("noise_std", 1e-3),
            cfg.get("seed", 0), cfg.get("n_cycles", 500), cfg.get("feature_noise_std"),
            cfg.get("truncate_at_eol", True), batch=batches)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "features.csv")
        truth = {c: {"params": v["params"], "eol": v["eol"]} for c, v in truth.items()}
    _write_json(out / "truth.json", {"config": cfg, "cells": truth})
    print(f"wrote synthetic dataset to {out}")
    return 0


def cmd_features(args) -> int:
    table = data.extract_dataset(args.data, jobs=args.jobs, ma_window=args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "features.csv")
    fit_on = table
    if args.case:
        fit_on = data.make_splits(args.case, table, args.seed, args.task).train
    data.write_factors(out / "factors.json", data.StandardizationFactors.fit_table(fit_on, args.task))
    print(f"{len(table)} feature rows from {len(table.cells)} cells -> {out}")
    return 0


def cmd_train(args) -> int:
    """Config keys: data, out, case (optional), task, split_seed, train (TrainConfig fields)."""
    cfg = _read_config(args.cfg)
    table = harness.resolve_table(cfg.get("data"))
    train_cfg = pinn.TrainConfig.from_dict(dict(cfg.get("train", {}), task=cfg.get("task", "soh")))
    validation = test = None
    if cfg.get("case"):
        split = data.make_splits(cfg["case"], table, cfg.get("split_seed", 0), train_cfg.task)
        table, validation, test = split.train, split.validation, split.test
    model = pinn.train(table, train_cfg, validation=validation)
    extra = {}
    if test is not None:
        extra["test"] = harness.evaluate(model, test).__dict__
    out = model.save_run(cfg.get("out", "run"), extra)
    print(json.dumps(model.metrics() | extra, indent=1, default=str))
    print(f"run directory: {out}")
    return 0


def cmd_eval(args) -> int:
    model = pinn.load_checkpoint(args.checkpoint)
    table = harness.resolve_table(args.data)
    task = args.task or model.config.task
    if args.case:
        table = data.make_splits(args.case, table, args.seed, task).test
    metrics = harness.evaluate(model, table, task)
    if args.out:
        pred = model.predict_table(table)
        df = table.to_frame()[["cell_id", "cycle"]]
        df["label"] = table.labels(task)
        df["prediction"] = pred
        df.to_csv(args.out, index=False, float_format="%.10g")
    print(json.dumps({"task": task, **metrics.__dict__}, indent=1))
    return 0


def _overrides(args) -> dict:
    out = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
           "dropout": args.dropout}
    if getattr(args, "hpm_inputs", None):
        out["hpm_terms"] = args.hpm_inputs
    return out


def cmd_run_case(args) -> int:
    variant = args.variant
    if args.dynamics:
        variant = {"none": "baseline", "verhulst": "pinn-verhulst",
                   "deephpm": "pinn-deephpm"}[args.dynamics]
    report = harness.run_case(args.case, args.task, variant, args.balancing, args.rounds,
                              args.seed, args.data, args.workers, args.out, **_overrides(args))
    summary = report.to_dict()
    print(json.dumps({k: summary[k] for k in ("case", "task", "variant", "balancing", "mean",
                                              "headline", "reference")}, indent=1))
    return 0


def cmd_sweep(args) -> int:
    layers = tuple(args.layers) if args.layers else harness.SWEEP_LAYERS
    neurons = tuple(args.neurons) if args.neurons else harness.SWEEP_NEURONS
    result = harness.sweep(args.axis, args.case, args.task, args.data, args.seed, layers, neurons,
                           args.library, args.workers, args.out, **_overrides(args))
    print(result.table().to_string(index=False))
    print("argmin:", json.dumps(result.argmin))
    return 0


def _add_training_overrides(p) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--workers", type=int, default=1, help="parallel rounds / sweep cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="battpinn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert published .mat batch files to the CSV schema")
    p.add_argument("src", nargs="+", help=".mat files or a directory holding them")
    p.add_argument("out")
    p.add_argument("--q-nom", type=float, default=data.Q_NOM)
    p.add_argument("--no-clean", action="store_true", help="keep every cell as recorded")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("simulate", help="generate a synthetic dataset from a JSON config")
    p.add_argument("cfg")
    p.add_argument("out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("features", help="extract the feature table from a raw dataset")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--window", type=int, default=10, help="trailing moving-average window")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--case", help="fit the factors sidecar on this case's training rows")
    p.add_argument("--task", default="soh", choices=("soh", "rul"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("cfg")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--task", choices=("soh", "rul"))
    p.add_argument("--case", help="evaluate on this case's test cells only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write per-row predictions CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-case", help="case A/B/C experiment averaged over rounds")
    p.add_argument("--case", required=True, choices=("A", "B", "C", "a", "b", "c"))
    p.add_argument("--task", default="soh", choices=("soh", "rul"))
    p.add_argument("--variant", default="pinn-deephpm", choices=sorted(harness.VARIANTS))
    p.add_argument("--dynamics", choices=("none", "verhulst", "deephpm"),
                   help="alternative to --variant")
    p.add_argument("--hpm-inputs", help="DeepHPM terms, e.g. 't,u,u_x'")
    p.add_argument("--balancing", default="adpbal", choices=pinn.BALANCING)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _add_training_overrides(p)
    p.set_defaults(func=cmd_run_case)

    p = sub.add_parser("sweep", help="validation grid over structures or DeepHPM inputs")
    p.add_argument("--axis", required=True, choices=("structure", "hpm-inputs"))
    p.add_argument("--case", required=True, choices=("A", "B", "C", "a", "b", "c"))
    p.add_argument("--task", default="soh", choices=("soh", "rul"))
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, nargs="+")
    p.add_argument("--neurons", type=int, nargs="+")
    p.add_argument("--library", nargs="+", help="input combinations, e.g. t 't,u'")
    p.add_argument("--out")
    _add_training_overrides(p)
    p.set_defaults(func=cmd_sweep, hpm_inputs=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        print(f"battpinn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
