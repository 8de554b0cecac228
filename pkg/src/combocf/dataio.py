"""Dataset CSV import/export with a JSON schema sidecar.

Layout: ``id,x_0..x_{p-1},t_0..t_{k-1},y`` with 0/1 treatment columns.
The sidecar (``<data>.schema.json`` by default) records the covariate
schema plus k and the generating seed; loading without it fails rather
than inferring types. Floats are written with ``repr`` so a round trip
reproduces the exact doubles.

Ground truth (for evaluation against an oracle) exports as
``id,mask,outcome`` rows with the treatment subset as a decimal bitmask.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .simcore import CovariateSchema, Dataset, OutcomeOracle, TreatmentSet, Unit

MAX_REPORTED_ROW_ERRORS = 20


def sidecar_path(data_path) -> Path:
    return Path(str(data_path) + ".schema.json")


def export_dataset(dataset: Dataset, path, schema_path=None) -> None:
    path = Path(path)
    schema_path = Path(schema_path) if schema_path else sidecar_path(path)
    p, k = dataset.schema.p, dataset.k
    header = (
        ["id"]
        + [f"x_{i}" for i in range(p)]
        + [f"t_{j}" for j in range(k)]
        + ["y"]
    )
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for u in dataset.units:
            row = [str(u.id)]
            row += [repr(float(v)) for v in u.x]
            row += [str(u.treatments.mask >> j & 1) for j in range(k)]
            row.append(repr(float(u.outcome)))
            writer.writerow(row)
    sidecar = {
        "schema": dataset.schema.to_json_dict(),
        "k": dataset.k,
        "seed": dataset.seed,
    }
    schema_path.write_text(json.dumps(sidecar, sort_keys=True, indent=1), encoding="utf-8")


def load_dataset(path, schema_path=None) -> Dataset:
    """Parse and validate an exported dataset; raises ``DataError`` with
    per-row messages (line numbers are 1-based, header is line 1)."""
    path = Path(path)
    schema_path = Path(schema_path) if schema_path else sidecar_path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if not schema_path.exists():
        raise DataError(
            f"schema sidecar not found: {schema_path} (refusing to infer covariate types)"
        )
    try:
        sidecar = json.loads(schema_path.read_text(encoding="utf-8"))
        schema = CovariateSchema.from_json_dict(sidecar["schema"])
        k = int(sidecar["k"])
        seed = int(sidecar["seed"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed schema sidecar {schema_path}: {exc}") from exc

    p = schema.p
    expected_header = (
        ["id"] + [f"x_{i}" for i in range(p)] + [f"t_{j}" for j in range(k)] + ["y"]
    )
    units: list[Unit] = []
    row_errors: list[str] = []
    seen_ids: set[int] = set()

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise DataError(f"{path}: header does not match the sidecar schema")
        for line_no, row in enumerate(reader, start=2):
            err = _parse_row(row, line_no, schema, k, seen_ids, units)
            if err:
                row_errors.append(err)
                if len(row_errors) >= MAX_REPORTED_ROW_ERRORS:
                    break
    if row_errors:
        raise DataError(
            f"{path}: {len(row_errors)} invalid row(s); first: {row_errors[0]}",
            row_errors=row_errors,
        )
    dataset = Dataset(schema=schema, k=k, units=units, seed=seed)
    dataset.validate()
    return dataset


def _parse_row(row, line_no, schema, k, seen_ids, units) -> str | None:
    p = schema.p
    if len(row) != 1 + p + k + 1:
        return f"line {line_no}: expected {1 + p + k + 1} fields, got {len(row)}"
    try:
        unit_id = int(row[0])
        x = np.array([float(v) for v in row[1 : 1 + p]])
        bits = [int(v) for v in row[1 + p : 1 + p + k]]
        y = float(row[-1])
    except ValueError as exc:
        return f"line {line_no}: {exc}"
    if unit_id in seen_ids:
        return f"line {line_no}: duplicate unit id {unit_id}"
    if any(b not in (0, 1) for b in bits):
        return f"line {line_no}: treatment indicators must be 0 or 1"
    mask = sum(b << j for j, b in enumerate(bits))
    if mask == 0:
        return f"line {line_no}: observed treatment set is empty"
    try:
        schema.validate_vector(x)
    except Exception as exc:
        return f"line {line_no}: {exc}"
    seen_ids.add(unit_id)
    units.append(Unit(id=unit_id, x=x, treatments=TreatmentSet(mask, k), outcome=y))
    return None


def export_truth(oracle: OutcomeOracle, units, path) -> None:
    """All counterfactual outcomes as ``id,mask,outcome`` rows."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mask", "outcome"])
        for u in units:
            row_values = oracle.counterfactual_row(u)
            for mask in range(1, (1 << oracle.k)):
                writer.writerow([str(u.id), str(mask), repr(float(row_values[mask - 1]))])


def load_truth(path) -> dict[tuple[int, int], float]:
    """Ground-truth table keyed by (unit id, mask)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"truth file not found: {path}")
    table: dict[tuple[int, int], float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "mask", "outcome"]:
            raise DataError(f"{path}: not a ground-truth table")
        for line_no, row in enumerate(reader, start=2):
            try:
                table[(int(row[0]), int(row[1]))] = float(row[2])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: line {line_no}: {exc}") from exc
    return table
