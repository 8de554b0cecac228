"""Composite per-combination baselines: ridge regression and kNN.

A composite model fits one independent sub-model per treatment combination
observed in the training data, plus one global sub-model trained on all
units with treatments ignored. Queries for an observed combination go to
its sub-model; unseen combinations fall back either to the sub-model of
the observed mask nearest in Hamming distance (ties toward the lowest
mask) or to the global sub-model, depending on configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, ContractError
from .simcore import TreatmentSet, Unit

FALLBACK_POLICIES = ("hamming", "global")


def ridge_fit(x: np.ndarray, y: np.ndarray, regularization: float) -> tuple[np.ndarray, float]:
    """Closed-form ridge on mean-centered data.

    Solves (Xc' Xc + C I) beta = Xc' y via Cholesky (C > 0 makes the system
    positive definite); the intercept restores the removed means.
    """
    if regularization <= 0:
        raise ConfigError(f"regularization {regularization} must be > 0")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) != len(y) or len(x) == 0:
        raise ContractError("ridge needs a non-empty (m, p) matrix and matching targets")
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    gram = xc.T @ xc + regularization * np.eye(x.shape[1])
    rhs = xc.T @ (y - y_mean)
    beta = cho_solve(cho_factor(gram, lower=True), rhs)
    intercept = y_mean - float(x_mean @ beta)
    return beta, intercept


@dataclass(frozen=True)
class RidgeSubModel:
    coef: np.ndarray
    intercept: float

    def predict(self, x: np.ndarray) -> float:
        return float(np.asarray(x, dtype=float) @ self.coef + self.intercept)


@dataclass(frozen=True)
class KNNSubModel:
    x: np.ndarray   # (m, p)
    y: np.ndarray   # (m,)
    ids: np.ndarray  # (m,)
    n_neighbors: int

    def predict(self, x: np.ndarray) -> float:
        dists = np.linalg.norm(self.x - np.asarray(x, dtype=float), axis=1)
        order = np.lexsort((self.ids, dists))  # distance first, lowest id on ties
        take = order[: min(self.n_neighbors, len(order))]
        return float(self.y[take].mean())


@dataclass
class CompositeModel:
    """One sub-model per observed treatment combination plus a fallback."""

    k: int
    submodels: dict[int, object]
    global_model: object
    fallback: str = "hamming"

    def __post_init__(self):
        if self.fallback not in FALLBACK_POLICIES:
            raise ConfigError(f"unknown fallback policy {self.fallback!r}")

    def _resolve(self, mask: int):
        if not self.submodels:
            raise ContractError("composite model has no fitted sub-models")
        sub = self.submodels.get(mask)
        if sub is not None:
            return sub
        if self.fallback == "global":
            return self.global_model
        best = min(
            self.submodels, key=lambda m: (bin(m ^ mask).count("1"), m)
        )
        return self.submodels[best]

    def predict(self, x: np.ndarray, treatments: TreatmentSet | int) -> float:
        mask = treatments.mask if isinstance(treatments, TreatmentSet) else int(treatments)
        if mask <= 0:
            raise ContractError("treatment set must be non-empty")
        return self._resolve(mask).predict(x)

    def predict_counterfactuals(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((1 << self.k) - 1)
        for mask in range(1, 1 << self.k):
            out[mask - 1] = self._resolve(mask).predict(x)
        return out

    def predict_counterfactual_matrix(self, units) -> np.ndarray:
        return np.array([self.predict_counterfactuals(u.x) for u in units])


def _fit_composite(units: list[Unit], k: int, fit_group, fallback: str) -> CompositeModel:
    if not units:
        raise ContractError("composite fitting needs a non-empty dataset")
    groups: dict[int, list[Unit]] = {}
    for u in units:
        groups.setdefault(u.treatments.mask, []).append(u)
    submodels = {mask: fit_group(members) for mask, members in sorted(groups.items())}
    global_model = fit_group(units)
    return CompositeModel(k=k, submodels=submodels, global_model=global_model, fallback=fallback)


def fit_composite_ridge(
    units: list[Unit], k: int, regularization: float = 1.0, fallback: str = "hamming"
) -> CompositeModel:
    def fit_group(members: list[Unit]):
        x = np.array([u.x for u in members])
        y = np.array([u.outcome for u in members])
        coef, intercept = ridge_fit(x, y, regularization)
        return RidgeSubModel(coef=coef, intercept=intercept)

    return _fit_composite(units, k, fit_group, fallback)


def fit_composite_knn(
    units: list[Unit], k: int, n_neighbors: int = 5, fallback: str = "hamming"
) -> CompositeModel:
    if n_neighbors < 1:
        raise ConfigError("n_neighbors must be >= 1")

    def fit_group(members: list[Unit]):
        return KNNSubModel(
            x=np.array([u.x for u in members]),
            y=np.array([u.outcome for u in members]),
            ids=np.array([u.id for u in members]),
            n_neighbors=n_neighbors,
        )

    return _fit_composite(units, k, fit_group, fallback)


COMPOSITE_FORMAT = "combocf-composite"
COMPOSITE_VERSION = 1


def _submodel_to_json(sub) -> dict:
    if isinstance(sub, RidgeSubModel):
        return {"kind": "ridge", "coef": sub.coef.tolist(), "intercept": sub.intercept}
    if isinstance(sub, KNNSubModel):
        return {
            "kind": "knn",
            "x": sub.x.tolist(),
            "y": sub.y.tolist(),
            "ids": sub.ids.tolist(),
            "n_neighbors": sub.n_neighbors,
        }
    raise ConfigError(f"unknown sub-model type {type(sub).__name__}")


def _submodel_from_json(d: dict):
    if d["kind"] == "ridge":
        return RidgeSubModel(coef=np.array(d["coef"], dtype=float), intercept=float(d["intercept"]))
    if d["kind"] == "knn":
        return KNNSubModel(
            x=np.array(d["x"], dtype=float),
            y=np.array(d["y"], dtype=float),
            ids=np.array(d["ids"], dtype=int),
            n_neighbors=int(d["n_neighbors"]),
        )
    raise ConfigError(f"unknown sub-model kind {d.get('kind')!r}")


def composite_to_json_dict(model: CompositeModel) -> dict:
    return {
        "format": COMPOSITE_FORMAT,
        "version": COMPOSITE_VERSION,
        "k": model.k,
        "fallback": model.fallback,
        "submodels": {str(mask): _submodel_to_json(sub) for mask, sub in sorted(model.submodels.items())},
        "global_model": _submodel_to_json(model.global_model),
    }


def composite_from_json_dict(d: dict) -> CompositeModel:
    if d.get("format") != COMPOSITE_FORMAT:
        raise ConfigError("not a composite model file")
    if d.get("version") != COMPOSITE_VERSION:
        raise ConfigError(f"unsupported composite version {d.get('version')!r}")
    return CompositeModel(
        k=int(d["k"]),
        submodels={int(mask): _submodel_from_json(sub) for mask, sub in d["submodels"].items()},
        global_model=_submodel_from_json(d["global_model"]),
        fallback=d["fallback"],
    )


def knn_predict(group: list[Unit], x: np.ndarray, n_neighbors: int) -> float:
    """Mean outcome of the n nearest units by Euclidean covariate distance."""
    if not group:
        raise ContractError("kNN needs a non-empty group")
    if n_neighbors < 1:
        raise ConfigError("n_neighbors must be >= 1")
    sub = KNNSubModel(
        x=np.array([u.x for u in group]),
        y=np.array([u.outcome for u in group]),
        ids=np.array([u.id for u in group]),
        n_neighbors=n_neighbors,
    )
    return sub.predict(x)
