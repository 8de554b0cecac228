"""Branched counterfactual regression model.

A stack of shared base layers maps covariates to a hidden representation;
each of the k treatments owns a small stack of affine "arm" layers. For a
sample treated with subset T, the arms of the active treatments are applied
sequentially in ascending treatment index, so concurrent treatments modulate
one shared representation, and a shared affine head maps the result to the
predicted outcome. During training only the arms present in a sample's
observed treatment set receive gradient, which falls out of the tape.

Arm layers compose affinely by default (``arm_activation=False``); base
layers use the configured activation plus inverted dropout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, TrainingDivergedError
from .rng import substream
from .simcore import MAX_TREATMENTS, TreatmentSet, Unit

MODEL_FORMAT = "combocf-ncore"
MODEL_VERSION = 1


@dataclass(frozen=True)
class NCoREConfig:
    k: int
    p: int
    hidden: int = 32
    base_layers: int = 1
    arm_depth: int = 1
    activation: str = "relu"
    arm_activation: bool = False
    dropout: float = 0.0
    weight_decay: float = 0.0
    learning_rate: float = 0.003
    batch_size: int = 32
    epochs: int = 100
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= MAX_TREATMENTS:
            raise ConfigError(f"k={self.k} outside [1, {MAX_TREATMENTS}]")
        if self.p < 1 or self.hidden < 1 or self.base_layers < 1 or self.arm_depth < 1:
            raise ConfigError("p, hidden, base_layers and arm_depth must all be >= 1")
        if self.activation not in dc.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate {self.learning_rate} must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Prediction:
    value: float
    hidden: np.ndarray


@dataclass
class TrainResult:
    loss_trace: list[float]
    val_trace: list[float] | None = None
    best_epoch: int | None = None
    stopped_early: bool = False


class NCoREModel:
    """Configured parameter set plus forward/enumeration logic."""

    def __init__(self, config: NCoREConfig, store: dc.ParamStore):
        self.config = config
        self.store = store
        k, depth = config.k, config.arm_depth
        self._base = [
            (store[f"base.{i}.W"], store[f"base.{i}.b"]) for i in range(config.base_layers)
        ]
        self._arms = [
            [(store[f"arm.{j}.{d}.W"], store[f"arm.{j}.{d}.b"]) for d in range(depth)]
            for j in range(k)
        ]
        self._head = (store["head.W"], store["head.b"])

    # -- value-only paths (prediction) ------------------------------------
    # Activations sit between base layers; the final base output is affine,
    # matching the published recursion's affine h for the empty set.

    def _base_values(self, x: np.ndarray) -> np.ndarray:
        relu = self.config.activation == "relu"
        h = x
        last = len(self._base) - 1
        for i, (w, b) in enumerate(self._base):
            h = w.value @ h + (b.value if h.ndim == 1 else b.value[:, None])
            if relu and i < last:
                h = np.maximum(h, 0.0)
        return h

    def _arm_values(self, j: int, h: np.ndarray) -> np.ndarray:
        relu = self.config.arm_activation and self.config.activation == "relu"
        for w, b in self._arms[j]:
            h = w.value @ h + (b.value if h.ndim == 1 else b.value[:, None])
            if relu:
                h = np.maximum(h, 0.0)
        return h

    def _head_values(self, h: np.ndarray) -> np.ndarray:
        w, b = self._head
        return w.value @ h + (b.value if h.ndim == 1 else b.value[:, None])

    # -- taped path (training / gradient checks) --------------------------

    def forward_taped(
        self,
        tape: dc.Tape,
        x,
        mask: int,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> dc.Node:
        """Record the forward pass for a vector x or a (p, m) group matrix
        whose samples all share the same treatment mask."""
        if mask <= 0:
            raise ContractError("treatment set must be non-empty")
        cfg = self.config
        if mask >= (1 << cfg.k):
            raise ContractError("treatment mask exceeds configured k")
        h = dc.constant(tape, x)
        last = len(self._base) - 1
        for i, (w, b) in enumerate(self._base):
            h = dc.affine(tape, w, b, h)
            if i < last:
                h = dc.activation(tape, cfg.activation, h)
            if training and cfg.dropout > 0.0:
                h = dc.dropout(tape, h, cfg.dropout, training, rng)
        for j in range(cfg.k):
            if mask >> j & 1:
                for w, b in self._arms[j]:
                    h = dc.affine(tape, w, b, h)
                    if cfg.arm_activation:
                        h = dc.activation(tape, cfg.activation, h)
        w, b = self._head
        return dc.affine(tape, w, b, h)

    # -- public prediction API ---------------------------------------------

    def forward(self, x: np.ndarray, treatments: TreatmentSet | int) -> Prediction:
        mask = treatments.mask if isinstance(treatments, TreatmentSet) else int(treatments)
        if mask <= 0:
            raise ContractError("treatment set must be non-empty")
        if mask >= (1 << self.config.k):
            raise ContractError("treatment mask exceeds configured k")
        h = self._base_values(np.asarray(x, dtype=float))
        for j in range(self.config.k):
            if mask >> j & 1:
                h = self._arm_values(j, h)
        return Prediction(value=float(self._head_values(h)[0]), hidden=h)

    def predict(self, x: np.ndarray, treatments: TreatmentSet | int) -> float:
        return self.forward(x, treatments).value

    def predict_counterfactuals(self, x: np.ndarray) -> np.ndarray:
        """Predictions for every non-empty treatment subset, indexed by
        bitmask - 1.

        Enumerates masks along a tree in which each step appends one arm of
        a higher index, so every mask is evaluated with exactly the same
        ascending arm applications as a standalone forward pass.
        """
        k = self.config.k
        if k > MAX_TREATMENTS:
            raise ConfigError(f"k={k} exceeds the 2^k enumeration bound")
        out = np.empty((1 << k) - 1)
        h0 = self._base_values(np.asarray(x, dtype=float))
        stack = [(h0, -1, 0)]
        while stack:
            h, top, mask = stack.pop()
            for j in range(top + 1, k):
                hj = self._arm_values(j, h)
                mj = mask | (1 << j)
                out[mj - 1] = float(self._head_values(hj)[0])
                stack.append((hj, j, mj))
        return out

    def predict_counterfactual_matrix(self, units) -> np.ndarray:
        return np.array([self.predict_counterfactuals(u.x) for u in units])

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": asdict(self.config),
            "checkpoint": self.store.to_json_dict(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "NCoREModel":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != MODEL_FORMAT:
            raise ConfigError("not a model file")
        if payload.get("version") != MODEL_VERSION:
            raise ConfigError(f"unsupported model version {payload.get('version')!r}")
        config = NCoREConfig(**payload["config"])
        store = dc.ParamStore.from_json_dict(payload["checkpoint"])
        return cls(config, store)


def build(config: NCoREConfig) -> NCoREModel:
    """Seeded parameter initialisation for the configured architecture."""
    rng = substream(config.seed, "init")
    store = dc.ParamStore()
    n, p = config.hidden, config.p
    fan_in = p
    for i in range(config.base_layers):
        store.add(f"base.{i}.W", dc.glorot_init(rng, n, fan_in))
        store.add(f"base.{i}.b", np.zeros(n))
        fan_in = n
    for j in range(config.k):
        for d in range(config.arm_depth):
            store.add(f"arm.{j}.{d}.W", dc.glorot_init(rng, n, n))
            store.add(f"arm.{j}.{d}.b", np.zeros(n))
    store.add("head.W", dc.glorot_init(rng, 1, n))
    store.add("head.b", np.zeros(1))
    return NCoREModel(config, store)


# ---------------------------------------------------------------------------
# batch sources and training


def uniform_batches(units: list[Unit], batch_size: int, rng: np.random.Generator):
    """One epoch of uniformly shuffled minibatches."""
    order = rng.permutation(len(units))
    for start in range(0, len(units), batch_size):
        yield [units[i] for i in order[start : start + batch_size]]


def _group_by_mask(batch: list[Unit]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    by_mask: dict[int, list[Unit]] = {}
    for u in batch:
        by_mask.setdefault(u.treatments.mask, []).append(u)
    groups = {}
    for mask in sorted(by_mask):
        members = by_mask[mask]
        x = np.array([u.x for u in members]).T  # (p, m)
        y = np.array([u.outcome for u in members])
        groups[mask] = (x, y)
    return groups


def _factual_rmse_grouped(model: NCoREModel, groups) -> float:
    sse = 0.0
    count = 0
    for mask, (x, y) in groups.items():
        h = model._base_values(x)
        for j in range(model.config.k):
            if mask >> j & 1:
                h = model._arm_values(j, h)
        pred = model._head_values(h)[0]
        resid = pred - y
        sse += float(resid @ resid)
        count += len(y)
    return float(np.sqrt(sse / count))


def _batch_loss_taped(model, tape, x_cols, masks_sorted, bounds, targets, rng):
    """Taped loss for one batch whose columns are pre-sorted by mask.

    Base layers run on the whole (p, B) matrix; each mask group is sliced
    out for its arm chain; the head is applied once to the re-concatenated
    hidden columns.
    """
    cfg = model.config
    h = dc.constant(tape, x_cols)
    last = len(model._base) - 1
    for i, (w, b) in enumerate(model._base):
        h = dc.affine(tape, w, b, h)
        if i < last:
            h = dc.activation(tape, cfg.activation, h)
        if cfg.dropout > 0.0:
            h = dc.dropout(tape, h, cfg.dropout, True, rng)
    parts = []
    for start, stop in bounds:
        mask = int(masks_sorted[start])
        part = dc.col_slice(tape, h, start, stop) if len(bounds) > 1 else h
        for j in range(cfg.k):
            if mask >> j & 1:
                for w, b in model._arms[j]:
                    part = dc.affine(tape, w, b, part)
                    if cfg.arm_activation:
                        part = dc.activation(tape, cfg.activation, part)
        parts.append(part)
    hidden = parts[0] if len(parts) == 1 else dc.concat_cols(tape, parts)
    w, b = model._head
    pred = dc.affine(tape, w, b, hidden)
    sse = dc.sum_squared_error(tape, pred, targets)
    return dc.scale(tape, sse, 1.0 / x_cols.shape[1])


def train(
    model: NCoREModel,
    units: list[Unit],
    batch_source=None,
    val_units: list[Unit] | None = None,
    patience: int | None = None,
) -> TrainResult:
    """Minimise mean squared factual error over minibatches.

    ``batch_source(units, batch_size, rng)`` yields one epoch of batches;
    the default shuffles uniformly. With ``val_units`` and ``patience``,
    training stops once validation factual RMSE has not improved for
    `patience` epochs and the best parameters are restored.
    """
    if not units:
        raise ContractError("training needs a non-empty dataset")
    cfg = model.config
    if batch_source is None:
        batch_source = uniform_batches
    rng = substream(cfg.seed, "train")
    model.store.compact()
    optimizer = dc.make_optimizer(cfg.optimizer, model.store, cfg.learning_rate, cfg.weight_decay)

    row_of = {u.id: i for i, u in enumerate(units)}
    x_all = np.array([u.x for u in units])
    y_all = np.array([u.outcome for u in units])
    masks_all = np.array([u.treatments.mask for u in units], dtype=np.int64)

    val_groups = _group_by_mask(val_units) if val_units else None
    best_val = np.inf
    best_epoch = None
    best_snapshot = None
    loss_trace: list[float] = []
    val_trace: list[float] = [] if val_groups else None
    stopped_early = False

    for epoch in range(cfg.epochs):
        epoch_sse = 0.0
        epoch_count = 0
        for batch_index, batch in enumerate(batch_source(units, cfg.batch_size, rng)):
            idx = np.fromiter((row_of[u.id] for u in batch), dtype=np.int64, count=len(batch))
            order = np.argsort(masks_all[idx], kind="stable")
            idx = idx[order]
            masks_sorted = masks_all[idx]
            splits = np.flatnonzero(np.diff(masks_sorted)) + 1
            edges = [0, *splits.tolist(), len(idx)]
            bounds = list(zip(edges[:-1], edges[1:]))

            tape = dc.Tape()
            loss_node = _batch_loss_taped(
                model, tape, x_all[idx].T, masks_sorted, bounds, y_all[idx], rng
            )
            if not np.isfinite(loss_node.value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}",
                    epoch=epoch,
                    batch_index=batch_index,
                    hyperparameters=asdict(cfg),
                )
            model.store.zero_grad()
            dc.backward(tape, loss_node)
            optimizer.step()
            epoch_sse += loss_node.value * len(batch)
            epoch_count += len(batch)
        loss_trace.append(epoch_sse / epoch_count)

        if val_groups is not None:
            val_rmse = _factual_rmse_grouped(model, val_groups)
            val_trace.append(val_rmse)
            if val_rmse < best_val:
                best_val = val_rmse
                best_epoch = epoch
                best_snapshot = model.store.snapshot()
            elif patience is not None and epoch - best_epoch >= patience:
                stopped_early = True
                break

    if best_snapshot is not None:
        model.store.restore(best_snapshot)
    return TrainResult(
        loss_trace=loss_trace,
        val_trace=val_trace,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )
