"""Metrics and statistical machinery for model comparison.

Counterfactual RMSE is taken over every non-empty treatment subset and
every test unit; factual RMSE (observed treatments only) drives model
selection. Uncertainty comes from a percentile bootstrap over units, and
method comparisons use the two-sided Mann-Whitney-Wilcoxon test with
midrank ties: exact tail enumeration for small samples, otherwise the
normal approximation with tie and continuity corrections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractError
from .simcore import OutcomeOracle, Unit

DEFAULT_RESAMPLES = 100
EXACT_MWW_LIMIT = 12  # pooled size at or below which the exact tail is enumerated


@dataclass(frozen=True)
class MetricReport:
    value: float
    ci_lower: float
    ci_upper: float
    n_resamples: int
    per_unit: np.ndarray  # per-unit mean squared error, kept for testing

    def __post_init__(self):
        if self.ci_lower > self.ci_upper:
            raise ContractError("bootstrap interval has lower > upper")

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n_resamples": self.n_resamples,
        }


def bootstrap_ci(
    values: np.ndarray,
    aggregate,
    n_resamples: int = DEFAULT_RESAMPLES,
    rng: np.random.Generator | None = None,
    percentiles: tuple[float, float] = (2.5, 97.5),
) -> tuple[float, float]:
    """Percentile bootstrap of `aggregate` over resampled values."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ContractError("bootstrap needs a non-empty sample")
    if rng is None:
        rng = np.random.default_rng(0)
    stats = np.empty(n_resamples)
    for r in range(n_resamples):
        idx = rng.integers(0, values.size, size=values.size)
        stats[r] = aggregate(values[idx])
    lo, hi = np.percentile(stats, percentiles)
    return float(lo), float(hi)


def _rmse_from_mse(per_unit_mse: np.ndarray) -> float:
    return float(np.sqrt(np.mean(per_unit_mse)))


def rmse_report_from_matrices(
    truth: np.ndarray,
    preds: np.ndarray,
    n_resamples: int = DEFAULT_RESAMPLES,
    rng: np.random.Generator | None = None,
) -> MetricReport:
    """RMSE over all (unit, treatment subset) cells with a unit-level bootstrap."""
    truth = np.asarray(truth, dtype=float)
    preds = np.asarray(preds, dtype=float)
    if truth.shape != preds.shape or truth.size == 0:
        raise ContractError("truth and prediction matrices must share a non-empty shape")
    per_unit = np.mean((truth - preds) ** 2, axis=1)
    lo, hi = bootstrap_ci(per_unit, _rmse_from_mse, n_resamples, rng)
    return MetricReport(
        value=_rmse_from_mse(per_unit),
        ci_lower=lo,
        ci_upper=hi,
        n_resamples=n_resamples,
        per_unit=per_unit,
    )


def counterfactual_rmse(
    predictor,
    oracle: OutcomeOracle,
    units: list[Unit],
    n_resamples: int = DEFAULT_RESAMPLES,
    rng: np.random.Generator | None = None,
) -> MetricReport:
    """RMSE between oracle and predicted outcomes over every non-empty
    treatment subset of every unit."""
    if not units:
        raise ContractError("counterfactual RMSE needs a non-empty test set")
    truth = oracle.counterfactual_matrix(units)
    preds = predictor.predict_counterfactual_matrix(units)
    return rmse_report_from_matrices(truth, preds, n_resamples, rng)


def factual_rmse(predictor, units: list[Unit]) -> float:
    """RMSE of predictions at each unit's observed treatment set."""
    if not units:
        raise ContractError("factual RMSE needs a non-empty set of units")
    sq = 0.0
    for u in units:
        err = predictor.predict(u.x, u.treatments) - u.outcome
        sq += err * err
    return math.sqrt(sq / len(units))


# ---------------------------------------------------------------------------
# Mann-Whitney-Wilcoxon


@dataclass(frozen=True)
class MWWResult:
    u_statistic: float
    p_value: float
    method: str  # "exact" or "normal"


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r_a = float(ranks[: len(a)].sum())
    return r_a - len(a) * (len(a) + 1) / 2.0


def _exact_two_sided_p(pooled: np.ndarray, n_a: int, u_obs: float) -> float:
    """Tail doubling over all C(n, n_a) label arrangements of the pooled sample."""
    n = len(pooled)
    gt = pooled[:, None] > pooled[None, :]
    eq = pooled[:, None] == pooled[None, :]
    at_or_below = 0
    at_or_above = 0
    total = 0
    all_idx = frozenset(range(n))
    for combo in combinations(range(n), n_a):
        a_idx = list(combo)
        b_idx = list(all_idx.difference(combo))
        u = gt[np.ix_(a_idx, b_idx)].sum() + 0.5 * eq[np.ix_(a_idx, b_idx)].sum()
        total += 1
        if u <= u_obs:
            at_or_below += 1
        if u >= u_obs:
            at_or_above += 1
    return min(1.0, 2.0 * min(at_or_below, at_or_above) / total)


def _normal_two_sided_p(a: np.ndarray, b: np.ndarray, u_obs: float) -> float:
    n_a, n_b = len(a), len(b)
    n = n_a + n_b
    mean_u = n_a * n_b / 2.0
    tie_term = 0.0
    pooled = np.sort(np.concatenate([a, b]))
    i = 0
    while i < n:
        j = i
        while j + 1 < n and pooled[j + 1] == pooled[i]:
            j += 1
        t = j - i + 1
        tie_term += t**3 - t
        i = j + 1
    var_u = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_u <= 0:
        return 1.0
    shift = abs(u_obs - mean_u) - 0.5  # continuity correction toward the mean
    z = max(shift, 0.0) / math.sqrt(var_u)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mww_test(sample_a, sample_b) -> MWWResult:
    """Two-sided Mann-Whitney-Wilcoxon test with midrank ties.

    The U statistic counts pairs in which sample_a exceeds sample_b (ties
    count one half). The p-value is exact (arrangement enumeration) when
    the pooled size is at most 12, else normal with tie and continuity
    corrections.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ContractError("both samples must be non-empty")
    u_obs = _u_statistic(a, b)
    if a.size + b.size <= EXACT_MWW_LIMIT:
        p = _exact_two_sided_p(np.concatenate([a, b]), a.size, u_obs)
        return MWWResult(u_statistic=u_obs, p_value=p, method="exact")
    p = _normal_two_sided_p(a, b, u_obs)
    return MWWResult(u_statistic=u_obs, p_value=p, method="normal")
