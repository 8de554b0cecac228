"""Command-line interface.

Subcommands: simulate, split, train, evaluate, hpo, sweep, export-truth.
Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import baselines, dataio, evalstats, harness, ncore
from .errors import CombocfError, ConfigError, ContractError, DataError
from .rng import substream
from .simcore import SimulationConfig, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_simulate_flags(p):
    p.add_argument("--n", type=int, required=True, help="number of units")
    p.add_argument("--k", type=int, required=True, help="number of treatments")
    p.add_argument("--bias", type=float, default=0.0, help="assignment bias strength")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="combocf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset CSV + schema sidecar")
    _add_simulate_flags(p)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("export-truth", help="export all counterfactual outcomes for a simulation")
    _add_simulate_flags(p)
    p.add_argument("--out", required=True, help="output CSV path (id,mask,outcome)")

    p = sub.add_parser("split", help="stratified train/validation/test split of a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.2, 0.2))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="fit one method and save the model file")
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--val", help="validation CSV (enables early stopping for ncore)")
    p.add_argument("--method", required=True, choices=harness.METHODS)
    p.add_argument("--hyperparameters", help="JSON file with method hyperparameters")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file path")

    p = sub.add_parser("evaluate", help="evaluate a saved model on a dataset CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", help="ground-truth CSV for counterfactual RMSE")
    p.add_argument("--resamples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="metrics JSON path (default: stdout)")

    p = sub.add_parser("hpo", help="random hyperparameter search, records to JSON")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="records JSON path")

    p = sub.add_parser("sweep", help="benchmark sweep over k, n or bias")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="long-format CSV path")
    return parser


def _load_config(path) -> harness.ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        return harness.ExperimentConfig.from_json_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed config {path}: {exc}") from exc


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc
    fmt = payload.get("format")
    if fmt == ncore.MODEL_FORMAT:
        return ncore.NCoREModel.load(path)
    if fmt == baselines.COMPOSITE_FORMAT:
        return baselines.composite_from_json_dict(payload)
    raise DataError(f"{path}: unrecognised model format {fmt!r}")


def _cmd_simulate(args) -> int:
    config = SimulationConfig(n=args.n, k=args.k, assignment_bias=args.bias, seed=args.seed)
    dataset, _ = generate_dataset(config)
    dataio.export_dataset(dataset, args.out)
    print(f"wrote {args.out} ({dataset.n} units, k={dataset.k})")
    return EXIT_OK


def _cmd_export_truth(args) -> int:
    config = SimulationConfig(n=args.n, k=args.k, assignment_bias=args.bias, seed=args.seed)
    dataset, oracle = generate_dataset(config)
    dataio.export_truth(oracle, dataset.units, args.out)
    n_rows = dataset.n * ((1 << dataset.k) - 1)
    print(f"wrote {args.out} ({n_rows} rows)")
    return EXIT_OK


def _cmd_split(args) -> int:
    dataset = dataio.load_dataset(args.data)
    folds = harness.split_dataset(dataset, tuple(args.ratios), substream(args.seed, "split"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, fold in zip(("train", "val", "test"), folds):
        dataio.export_dataset(fold, out_dir / f"{name}.csv")
    print(f"wrote {out_dir}/{{train,val,test}}.csv sized {[f.n for f in folds]}")
    return EXIT_OK


def _default_hyperparameters(method: str) -> dict:
    if method in ("ridge", "ridge_global"):
        return {"regularization": 1.0}
    if method == "knn":
        return {"n_neighbors": 5}
    return {
        "hidden": 32,
        "base_layers": 1,
        "batch_size": 32,
        "weight_decay": 0.0,
        "learning_rate": 0.003,
        "dropout": 0.0,
    }


def _cmd_train(args) -> int:
    train_ds = dataio.load_dataset(args.data)
    val_units = dataio.load_dataset(args.val).units if args.val else None
    if args.hyperparameters:
        hp_path = Path(args.hyperparameters)
        if not hp_path.exists():
            raise DataError(f"hyperparameter file not found: {hp_path}")
        hyperparameters = json.loads(hp_path.read_text(encoding="utf-8"))
    else:
        hyperparameters = _default_hyperparameters(args.method)
    settings = harness.TrainSettings(epochs=args.epochs, patience=args.patience)
    model = harness._fit_method(
        args.method, hyperparameters, train_ds.units, val_units, train_ds, settings, args.seed
    )
    if isinstance(model, ncore.NCoREModel):
        model.save(args.out)
    else:
        Path(args.out).write_text(
            json.dumps(baselines.composite_to_json_dict(model), sort_keys=True), encoding="utf-8"
        )
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    dataset = dataio.load_dataset(args.data)
    metrics = {"factual_rmse": evalstats.factual_rmse(model, dataset.units)}
    if args.truth:
        table = dataio.load_truth(args.truth)
        truth = harness._truth_matrix_from_table(table, dataset.units, dataset.k)
        preds = model.predict_counterfactual_matrix(dataset.units)
        report = evalstats.rmse_report_from_matrices(
            truth, preds, args.resamples, substream(args.seed, "bootstrap")
        )
        metrics["counterfactual_rmse"] = report.to_json_dict()
    text = json.dumps(metrics, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


def _cmd_hpo(args) -> int:
    config = _load_config(args.config)
    dataset, _ = harness.make_dataset(config)
    train_ds, val_ds, _test_ds = harness.split_dataset(
        dataset, config.split_ratios, substream(config.seed, "split")
    )
    settings = harness.TrainSettings(
        epochs=config.epochs, patience=config.patience, score_dim=config.score_dim
    )
    payload = {}
    for method in config.methods:
        result = harness.hpo_search(
            method,
            train_ds.units,
            val_ds.units,
            dataset,
            config.hpo_budget,
            substream(config.seed, "hpo", method),
            settings,
            config_hash=config.config_hash(),
        )
        payload[method] = {
            "best": {
                "hyperparameters": result.best.hyperparameters,
                "val_rmse": result.best.val_rmse,
            },
            "records": [
                {
                    "hyperparameters": r.hyperparameters,
                    "val_rmse": r.val_rmse,
                    "error": r.error,
                }
                for r in result.records
            ],
        }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_config(args.config)
    values = [int(v) if args.axis in ("k", "n") else float(v) for v in args.values]
    rows = harness.run_sweep(args.axis, values, config, output_path=args.out, workers=args.workers)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "export-truth": _cmd_export_truth,
    "split": _cmd_split,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "hpo": _cmd_hpo,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"combocf: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"combocf: data error: {exc}", file=sys.stderr)
        for line in exc.row_errors[:10]:
            print(f"  {line}", file=sys.stderr)
        return EXIT_DATA
    except (CombocfError, OSError) as exc:
        print(f"combocf: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
