"""Experiment orchestration: splits, hyperparameter search, benchmarks, sweeps.

A benchmark cell takes a dataset (usually simulated), splits it into
train/validation/test folds stratified on the treatment indicators, runs a
uniform random hyperparameter search per method selecting on validation
factual RMSE, and evaluates the winner's counterfactual RMSE (with a
percentile-bootstrap interval) on the test fold. Sweeps repeat the cell
over one axis (number of treatments, sample size, or assignment bias) and
several replicate seeds, emitting a long-format CSV ready for plotting.

Determinism: every stochastic site derives a labelled substream from the
experiment seed, result rows are sorted before writing, and wall-clock
times are kept out of the emitted files, so rerunning a configuration
reproduces the output bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio, evalstats, matching, ncore
from .baselines import fit_composite_knn, fit_composite_ridge
from .errors import ConfigError, ContractError, DataError, SearchFailedError, TrainingDivergedError
from .rng import spawn_seed, substream
from .simcore import Dataset, OutcomeOracle, SimulationConfig, generate_dataset

METHODS = ("ncore", "ncore_balanced", "ridge", "ridge_global", "knn")

HYPERPARAMETER_SPACES: dict[str, dict[str, tuple]] = {
    "ridge": {"regularization": (0.1, 1.0, 10.0)},
    "ridge_global": {"regularization": (0.1, 1.0, 10.0)},
    "knn": {"n_neighbors": (5,)},
    "ncore": {
        "hidden": (8, 16, 32, 64),
        "base_layers": (1, 2, 3),
        "batch_size": (16, 32, 64, 128),
        "weight_decay": (0.0, 1e-5, 1e-4),
        "learning_rate": (0.003, 0.03),
        "dropout": (0.0, 0.10, 0.15, 0.25),
    },
}
HYPERPARAMETER_SPACES["ncore_balanced"] = HYPERPARAMETER_SPACES["ncore"]

DEFAULT_K_SWEEP = (2, 4, 6, 8)
DEFAULT_N_SWEEP = (500, 1000, 2000, 4000)
DEFAULT_BIAS_SWEEP = (5.0, 10.0, 15.0, 20.0)
SWEEP_AXES = ("k", "n", "bias")


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...]
    simulate: SimulationConfig | None = None
    data_path: str | None = None
    truth_path: str | None = None
    hpo_budget: int = 30
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    n_resamples: int = 100
    epochs: int = 300
    patience: int = 30
    score_dim: int = matching.DEFAULT_SCORE_DIM
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        if self.hpo_budget < 1:
            raise ConfigError("hyperparameter search budget must be >= 1")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise ConfigError("split ratios must be three positive numbers")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios {self.split_ratios} must sum to 1")
        if self.simulate is None and self.data_path is None:
            raise ConfigError("config needs either a simulate block or a data path")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs and patience must be >= 1")

    def to_json_dict(self) -> dict:
        d = {
            "methods": list(self.methods),
            "hpo_budget": self.hpo_budget,
            "split_ratios": list(self.split_ratios),
            "seed": self.seed,
            "eval_seeds": list(self.eval_seeds),
            "n_resamples": self.n_resamples,
            "epochs": self.epochs,
            "patience": self.patience,
            "score_dim": self.score_dim,
        }
        if self.simulate is not None:
            sim = {
                "n": self.simulate.n,
                "k": self.simulate.k,
                "assignment_bias": self.simulate.assignment_bias,
                "seed": self.simulate.seed,
            }
            if self.simulate.schema is not None:
                sim["schema"] = self.simulate.schema.to_json_dict()
            d["simulate"] = sim
        if self.data_path is not None:
            d["data_path"] = self.data_path
        if self.truth_path is not None:
            d["truth_path"] = self.truth_path
        if self.output_dir is not None:
            d["output_dir"] = self.output_dir
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        simulate = None
        if "simulate" in d:
            sim = dict(d["simulate"])
            schema = sim.pop("schema", None)
            if schema is not None:
                from .simcore import CovariateSchema

                sim["schema"] = CovariateSchema.from_json_dict(schema)
            simulate = SimulationConfig(**sim)
        kwargs = {k: v for k, v in d.items() if k != "simulate"}
        if "methods" in kwargs:
            kwargs["methods"] = tuple(kwargs["methods"])
        if "split_ratios" in kwargs:
            kwargs["split_ratios"] = tuple(kwargs["split_ratios"])
        if "eval_seeds" in kwargs:
            kwargs["eval_seeds"] = tuple(kwargs["eval_seeds"])
        return cls(simulate=simulate, **kwargs)

    def identity_json_dict(self) -> dict:
        """Config echo without the output destination (which is not part of
        the experiment's identity and would break byte-level reproducibility
        of result files written to different directories)."""
        d = self.to_json_dict()
        d.pop("output_dir", None)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.identity_json_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


@dataclass
class RunRecord:
    method: str
    hyperparameters: dict
    run_seed: int
    val_rmse: float | None
    config_hash: str
    wall_time: float  # kept in memory only; never written to result files
    error: str | None = None


@dataclass
class HPOResult:
    best: RunRecord
    best_model: object
    records: list[RunRecord]


@dataclass
class MethodResult:
    method: str
    hyperparameters: dict
    val_rmse: float
    report: evalstats.MetricReport

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "hyperparameters": self.hyperparameters,
            "val_rmse": self.val_rmse,
            "test_counterfactual_rmse": self.report.to_json_dict(),
        }


@dataclass
class BenchmarkResult:
    config: ExperimentConfig
    methods: list[MethodResult]

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.identity_json_dict(),
            "results": [m.to_json_dict() for m in self.methods],
        }


# ---------------------------------------------------------------------------
# stratified splitting


def _integer_targets(n: int, ratios) -> list[int]:
    raw = [r * n for r in ratios]
    floors = [int(np.floor(v)) for v in raw]
    leftover = n - sum(floors)
    remainders = sorted(range(len(ratios)), key=lambda f: (-(raw[f] - floors[f]), f))
    for f in remainders[:leftover]:
        floors[f] += 1
    return floors


def split_dataset(
    dataset: Dataset, ratios, rng: np.random.Generator
) -> tuple[Dataset, Dataset, Dataset]:
    """Greedy iterative stratification on the treatment-indicator labels.

    Repeatedly takes the rarest label with unassigned carriers and deals
    those units to the fold with the greatest remaining demand for that
    label (ties: most remaining capacity, then a random choice). Fold
    capacities are fixed up front by largest-remainder rounding, so fold
    sizes land within a unit of the requested ratios.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {ratios} must be three positive numbers summing to 1")
    n = dataset.n
    if n < 10:
        raise ContractError(f"splitting needs at least 10 units, got {n}")
    k = dataset.k
    n_folds = len(ratios)
    capacity = _integer_targets(n, ratios)

    label_sets = [u.treatments.indices() for u in dataset.units]
    desired = [[ratios[f] * sum(1 for ls in label_sets if l in ls) for l in range(k)]
               for f in range(n_folds)]
    unassigned = set(range(n))
    label_remaining = [sum(1 for i in unassigned if l in label_sets[i]) for l in range(k)]
    assignment = [-1] * n

    while unassigned:
        live = [l for l in range(k) if label_remaining[l] > 0]
        label = min(live, key=lambda l: (label_remaining[l], l))
        carriers = sorted(i for i in unassigned if label in label_sets[i])
        for i in rng.permutation(len(carriers)):
            unit_idx = carriers[i]
            if unit_idx not in unassigned:
                continue
            open_folds = [f for f in range(n_folds) if capacity[f] > 0]
            best_demand = max(desired[f][label] for f in open_folds)
            tied = [f for f in open_folds if desired[f][label] == best_demand]
            if len(tied) > 1:
                best_cap = max(capacity[f] for f in tied)
                tied = [f for f in tied if capacity[f] == best_cap]
            fold = tied[int(rng.integers(0, len(tied)))] if len(tied) > 1 else tied[0]
            assignment[unit_idx] = fold
            capacity[fold] -= 1
            unassigned.discard(unit_idx)
            for l in label_sets[unit_idx]:
                desired[fold][l] -= 1.0
                label_remaining[l] -= 1

    folds = [[], [], []]
    for idx, fold in enumerate(assignment):
        folds[fold].append(dataset.units[idx])
    return tuple(
        Dataset(schema=dataset.schema, k=dataset.k, units=members, seed=dataset.seed)
        for members in folds
    )


# ---------------------------------------------------------------------------
# hyperparameter search


def _sample_hyperparameters(space: dict[str, tuple], rng: np.random.Generator) -> dict:
    return {name: space[name][int(rng.integers(0, len(space[name])))] for name in sorted(space)}


def _fit_method(method, hyperparameters, train_units, val_units, dataset, settings, run_seed):
    k, schema = dataset.k, dataset.schema
    if method in ("ridge", "ridge_global"):
        fallback = "global" if method == "ridge_global" else "hamming"
        return fit_composite_ridge(
            train_units, k, regularization=hyperparameters["regularization"], fallback=fallback
        )
    if method == "knn":
        return fit_composite_knn(train_units, k, n_neighbors=hyperparameters["n_neighbors"])
    if method in ("ncore", "ncore_balanced"):
        config = ncore.NCoREConfig(
            k=k,
            p=schema.p,
            hidden=hyperparameters["hidden"],
            base_layers=hyperparameters["base_layers"],
            batch_size=hyperparameters["batch_size"],
            weight_decay=hyperparameters["weight_decay"],
            learning_rate=hyperparameters["learning_rate"],
            dropout=hyperparameters["dropout"],
            epochs=settings.epochs,
            seed=run_seed,
        )
        model = ncore.build(config)
        if method == "ncore_balanced":
            projector = matching.fit_projector(
                np.array([u.x for u in train_units]),
                min(settings.score_dim, schema.p),
            )
            batch_source = matching.balanced_batch_source(projector, train_units)
        else:
            batch_source = None
        ncore.train(
            model,
            train_units,
            batch_source=batch_source,
            val_units=val_units,
            patience=settings.patience,
        )
        return model
    raise ConfigError(f"unknown method {method!r}")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 300
    patience: int = 30
    score_dim: int = matching.DEFAULT_SCORE_DIM


def hpo_search(
    method: str,
    train_units,
    val_units,
    dataset: Dataset,
    budget: int,
    rng: np.random.Generator,
    settings: TrainSettings = TrainSettings(),
    config_hash: str = "",
) -> HPOResult:
    """Uniform random search over the method's hyperparameter grid.

    Each run samples one configuration, fits on the training fold and
    scores factual RMSE on the validation fold; the record with the lowest
    validation RMSE wins. Deterministic-fit methods (ridge, knn) reuse the
    fitted model when a configuration is drawn twice.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if method not in HYPERPARAMETER_SPACES:
        raise ConfigError(f"unknown method {method!r}")
    space = HYPERPARAMETER_SPACES[method]
    deterministic_fit = method in ("ridge", "ridge_global", "knn")
    cache: dict[tuple, tuple] = {}
    records: list[RunRecord] = []
    fitted: list = []
    for _ in range(budget):
        hyperparameters = _sample_hyperparameters(space, rng)
        run_seed = int(rng.integers(0, 2**63 - 1))
        key = tuple(sorted(hyperparameters.items()))
        start = time.perf_counter()
        try:
            if deterministic_fit and key in cache:
                model, val_rmse = cache[key]
            else:
                model = _fit_method(
                    method, hyperparameters, train_units, val_units, dataset, settings, run_seed
                )
                val_rmse = evalstats.factual_rmse(model, val_units)
                if deterministic_fit:
                    cache[key] = (model, val_rmse)
            record = RunRecord(
                method=method,
                hyperparameters=hyperparameters,
                run_seed=run_seed,
                val_rmse=val_rmse,
                config_hash=config_hash,
                wall_time=time.perf_counter() - start,
            )
            fitted.append(model)
        except TrainingDivergedError as exc:
            record = RunRecord(
                method=method,
                hyperparameters=hyperparameters,
                run_seed=run_seed,
                val_rmse=None,
                config_hash=config_hash,
                wall_time=time.perf_counter() - start,
                error=str(exc),
            )
            fitted.append(None)
        records.append(record)
    ok = [i for i, r in enumerate(records) if r.error is None]
    if not ok:
        raise SearchFailedError(f"all {budget} search runs failed for {method}", records=records)
    best_idx = min(ok, key=lambda i: (records[i].val_rmse, i))
    return HPOResult(best=records[best_idx], best_model=fitted[best_idx], records=records)


# ---------------------------------------------------------------------------
# benchmark and sweep


def make_dataset(config: ExperimentConfig) -> tuple[Dataset, OutcomeOracle | None]:
    if config.simulate is not None:
        return generate_dataset(config.simulate)
    return dataio.load_dataset(config.data_path), None


def _truth_matrix_from_table(table, units, k) -> np.ndarray:
    out = np.empty((len(units), (1 << k) - 1))
    for i, u in enumerate(units):
        for mask in range(1, 1 << k):
            key = (u.id, mask)
            if key not in table:
                raise DataError(f"truth table is missing unit {u.id}, mask {mask}")
            out[i, mask - 1] = table[key]
    return out


def run_benchmark(
    config: ExperimentConfig,
    dataset: Dataset | None = None,
    oracle: OutcomeOracle | None = None,
) -> BenchmarkResult:
    """Split, search, and evaluate every configured method on one dataset."""
    if dataset is None:
        dataset, oracle = make_dataset(config)
    truth_table = None
    if oracle is None:
        if config.truth_path is None:
            raise ConfigError(
                "counterfactual evaluation needs a simulated dataset or a truth table"
            )
        truth_table = dataio.load_truth(config.truth_path)

    train_ds, val_ds, test_ds = split_dataset(
        dataset, config.split_ratios, substream(config.seed, "split")
    )
    if oracle is not None:
        truth = oracle.counterfactual_matrix(test_ds.units)
    else:
        truth = _truth_matrix_from_table(truth_table, test_ds.units, dataset.k)

    settings = TrainSettings(
        epochs=config.epochs, patience=config.patience, score_dim=config.score_dim
    )
    cfg_hash = config.config_hash()
    results = []
    for method in config.methods:
        hpo = hpo_search(
            method,
            train_ds.units,
            val_ds.units,
            dataset,
            config.hpo_budget,
            substream(config.seed, "hpo", method),
            settings,
            config_hash=cfg_hash,
        )
        preds = hpo.best_model.predict_counterfactual_matrix(test_ds.units)
        report = evalstats.rmse_report_from_matrices(
            truth, preds, config.n_resamples, substream(config.seed, "bootstrap", method)
        )
        results.append(
            MethodResult(
                method=method,
                hyperparameters=hpo.best.hyperparameters,
                val_rmse=hpo.best.val_rmse,
                report=report,
            )
        )

    result = BenchmarkResult(config=config, methods=results)
    if config.output_dir is not None:
        _write_benchmark_outputs(result, Path(config.output_dir))
    return result


def _write_benchmark_outputs(result: BenchmarkResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(
        json.dumps(result.to_json_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    with (out_dir / "results.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "rmse", "ci_lower", "ci_upper", "val_rmse"])
        for m in result.methods:
            writer.writerow(
                [
                    m.method,
                    repr(m.report.value),
                    repr(m.report.ci_lower),
                    repr(m.report.ci_upper),
                    repr(m.val_rmse),
                ]
            )


def _sweep_cell(args) -> list[tuple]:
    axis, value_index, value, replicate, base_config = args
    sim = base_config.simulate
    dataset_seed = spawn_seed(base_config.seed, "dataset", replicate)
    if axis == "k":
        sim = replace(sim, k=int(value), seed=dataset_seed)
    elif axis == "n":
        sim = replace(sim, n=int(value), seed=dataset_seed)
    elif axis == "bias":
        sim = replace(sim, assignment_bias=float(value), seed=dataset_seed)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    cell_config = replace(
        base_config,
        simulate=sim,
        seed=spawn_seed(base_config.seed, "cell", value_index, replicate),
        output_dir=None,
    )
    result = run_benchmark(cell_config)
    rows = []
    for m in result.methods:
        rows.append(
            (axis, value, m.method, replicate, m.report.value, m.report.ci_lower, m.report.ci_upper)
        )
    return rows


def run_sweep(
    axis: str,
    values,
    base_config: ExperimentConfig,
    output_path=None,
    workers: int = 1,
) -> list[tuple]:
    """One full benchmark per (axis value, replicate seed); returns long-format
    rows (axis, value, method, seed, rmse, ci_lower, ci_upper), sorted.

    Cells are independent and can run on a process pool; ordering and
    therefore output bytes do not depend on the worker count.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(values)
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two axis values")
    if base_config.simulate is None:
        raise ConfigError("sweeps require a simulate block in the base config")

    jobs = [
        (axis, vi, value, replicate, base_config)
        for vi, value in enumerate(values)
        for replicate in base_config.eval_seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_job = list(pool.map(_sweep_cell, jobs))
    else:
        per_job = [_sweep_cell(job) for job in jobs]

    method_order = {m: i for i, m in enumerate(base_config.methods)}
    rows = [row for rows in per_job for row in rows]
    rows.sort(key=lambda r: (values.index(r[1]), method_order[r[2]], r[3]))

    if output_path is not None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with output_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis", "value", "method", "seed", "rmse", "ci_lower", "ci_upper"])
            for axis_name, value, method, seed, rmse, lo, hi in rows:
                writer.writerow(
                    [axis_name, value, method, seed, repr(float(rmse)), repr(float(lo)), repr(float(hi))]
                )
    return rows
