"""Balancing scores and randomized approximately-balanced batches.

Treatment assignment bias leaves covariate distributions differing across
treatment combinations. To mitigate it during training, units are matched
in a low-dimensional balancing-score space (top principal components of
the covariates) and minibatches are built so that the treatment
combinations they contain appear in near-equal counts while staying
covariate-homogeneous.

Batch construction starts from a uniformly chosen seed unit and repeatedly
(a) picks, uniformly at random, a treatment combination that is still
available in the pool and not yet represented in the batch (the
"not yet represented" bookkeeping resets once every available combination
is represented), then (b) adds the unit of that combination whose score is
nearest (Euclidean) to the running centroid of the batch's scores, with
exact distance ties resolved toward the lowest unit id. Matching is a
linear scan over the candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DegenerateDataError, DimensionError
from .simcore import Unit

DEFAULT_SCORE_DIM = 8


@dataclass(frozen=True)
class BalancingProjector:
    """Mean vector plus orthonormal principal-component rows (D x p)."""

    mean: np.ndarray
    components: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.mean.shape[0]:
            raise DimensionError(
                f"input dimension {x.shape[-1]} does not match projector dimension {self.mean.shape[0]}"
            )
        return (x - self.mean) @ self.components.T


def fit_projector(x: np.ndarray, n_components: int) -> BalancingProjector:
    """Top principal components via eigendecomposition of the covariance.

    Components are ordered by descending eigenvalue and sign-fixed so the
    largest-magnitude entry of each is positive.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("projector fitting needs an (n, p) matrix with n >= 2")
    p = x.shape[1]
    if not 1 <= n_components <= p:
        raise ConfigError(f"n_components={n_components} outside [1, {p}]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    if not np.any(np.abs(cov) > 0.0):
        raise DegenerateDataError("covariates are constant; no principal directions exist")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    components = eigvecs[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    mean = mean.copy()
    mean.flags.writeable = False
    components.flags.writeable = False
    return BalancingProjector(mean=mean, components=components)


def project(projector: BalancingProjector, x: np.ndarray) -> np.ndarray:
    return projector.project(x)


def build_balanced_batch(
    units: list[Unit],
    scores: np.ndarray,
    size: int,
    rng: np.random.Generator,
    on_select=None,
) -> list[Unit]:
    """Build one approximately combination-balanced batch of up to `size`
    units; consumes nothing (callers pass disjoint pools for partitioning).

    ``on_select(candidate_ids, chosen_id, centroid)`` is an optional hook
    used by tests to audit each nearest-match decision.
    """
    if not units:
        raise ContractError("batch construction needs a non-empty pool")
    if size < 1:
        raise ConfigError("batch size must be >= 1")
    scores = np.asarray(scores, dtype=float)
    if len(scores) != len(units):
        raise DimensionError("one balancing score required per pooled unit")

    remaining_by_mask: dict[int, list[int]] = {}
    for idx, u in enumerate(units):
        remaining_by_mask.setdefault(u.treatments.mask, []).append(idx)

    seed_idx = int(rng.integers(0, len(units)))
    seed_unit = units[seed_idx]
    batch = [seed_unit]
    remaining_by_mask[seed_unit.treatments.mask].remove(seed_idx)
    if not remaining_by_mask[seed_unit.treatments.mask]:
        del remaining_by_mask[seed_unit.treatments.mask]
    represented = {seed_unit.treatments.mask}
    centroid_sum = scores[seed_idx].astype(float).copy()

    while len(batch) < size and remaining_by_mask:
        available = sorted(remaining_by_mask)
        fresh = [m for m in available if m not in represented]
        if not fresh:
            represented = set()  # every available combination already in the batch
            fresh = available
        mask = fresh[int(rng.integers(0, len(fresh)))]
        candidates = remaining_by_mask[mask]
        centroid = centroid_sum / len(batch)
        dists = np.linalg.norm(scores[candidates] - centroid, axis=1)
        best_pos = min(
            range(len(candidates)), key=lambda i: (dists[i], units[candidates[i]].id)
        )
        chosen_idx = candidates[best_pos]
        if on_select is not None:
            on_select([units[i].id for i in candidates], units[chosen_idx].id, centroid)
        batch.append(units[chosen_idx])
        centroid_sum += scores[chosen_idx]
        represented.add(mask)
        candidates.pop(best_pos)
        if not candidates:
            del remaining_by_mask[mask]
    return batch


def balanced_batches(
    units: list[Unit],
    scores: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
):
    """Partition one epoch into balanced batches, consuming the pool."""
    pool = list(units)
    pool_scores = np.asarray(scores, dtype=float)
    while pool:
        batch = build_balanced_batch(pool, pool_scores, batch_size, rng)
        taken = {id(u) for u in batch}
        keep = [i for i, u in enumerate(pool) if id(u) not in taken]
        pool = [pool[i] for i in keep]
        pool_scores = pool_scores[keep]
        yield batch


def balanced_batch_source(projector: BalancingProjector, all_units: list[Unit]):
    """Batch source for :func:`combocf.ncore.train` backed by balanced batches.

    Scores are computed once for `all_units`; the returned callable matches
    the ``(units, batch_size, rng)`` signature of the uniform source.
    """
    score_by_id = {u.id: projector.project(u.x) for u in all_units}

    def source(units: list[Unit], batch_size: int, rng: np.random.Generator):
        scores = np.array([score_by_id[u.id] for u in units])
        return balanced_batches(units, scores, batch_size, rng)

    return source
