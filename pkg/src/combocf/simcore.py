"""Synthetic combination-treatment data generator.

Produces observational datasets in which each unit carries mixed
discrete/continuous covariates, one observed subset of the k available
treatments, and one factual outcome, together with an immutable outcome
oracle that can answer counterfactual queries for any non-empty treatment
subset of the same unit.

Generative pipeline:

1. covariates: independent Bernoulli indicators and uniform continuous
   features drawn per the schema;
2. one archetype vector per treatment, sampled uniformly with replacement
   from the generated population;
3. per-treatment outcome models: a centroid drawn from the population, a
   truncated-Gaussian level, and fixed truncation bounds;
4. interaction coefficients for every treatment subset of size 2..5, 80%
   of which are gated to exactly zero;
5. per-unit treatment assignment: subset size is min(Poisson(2)+1, k) and
   membership is drawn without replacement with softmax(-bias * distance
   to archetype) weights;
6. factual outcome = the oracle's counterfactual at the observed subset.

All randomness is derived from one master seed via labelled substreams
(see :mod:`combocf.rng`), so datasets and counterfactual queries are
bit-for-bit reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, SchemaError
from .rng import substream

OUTCOME_LOWER = 0.84
OUTCOME_UPPER = 7.69
SINGLE_OUTCOME_SD = 0.5
INTERACTION_MEAN = -0.03
INTERACTION_SD = 0.015
INTERACTION_RATE = 0.2  # fraction of interaction coefficients left nonzero
INTERACTION_SCALE_BASE = 1.02
MAX_INTERACTION_DEGREE = 5
EXTRA_TREATMENT_RATE = 2.0  # Poisson rate for treatments beyond the first
MAX_TREATMENTS = 20  # 2^k enumeration bound


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CovariateSchema:
    """Typed layout of a covariate vector.

    ``discrete_indices`` and ``continuous_indices`` partition ``range(p)``.
    ``bernoulli_rates`` aligns with the discrete indices, ``ranges`` with
    the continuous ones.
    """

    discrete_indices: tuple[int, ...]
    continuous_indices: tuple[int, ...]
    bernoulli_rates: tuple[float, ...]
    ranges: tuple[tuple[float, float], ...]

    def __post_init__(self):
        d = tuple(int(i) for i in self.discrete_indices)
        c = tuple(int(i) for i in self.continuous_indices)
        object.__setattr__(self, "discrete_indices", d)
        object.__setattr__(self, "continuous_indices", c)
        object.__setattr__(
            self, "bernoulli_rates", tuple(float(r) for r in self.bernoulli_rates)
        )
        object.__setattr__(
            self, "ranges", tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        )
        p = len(d) + len(c)
        if p == 0:
            raise SchemaError("schema must declare at least one covariate")
        if set(d) & set(c):
            raise SchemaError("discrete and continuous index sets overlap")
        if sorted(d + c) != list(range(p)):
            raise SchemaError("index sets must partition range(p) without gaps")
        if len(self.bernoulli_rates) != len(d):
            raise SchemaError("one Bernoulli rate required per discrete index")
        if len(self.ranges) != len(c):
            raise SchemaError("one (min, max) range required per continuous index")
        for r in self.bernoulli_rates:
            if not 0.0 <= r <= 1.0:
                raise SchemaError(f"Bernoulli rate {r} outside [0, 1]")
        for lo, hi in self.ranges:
            if not lo < hi:
                raise SchemaError(f"range ({lo}, {hi}) must satisfy min < max")

    @property
    def p(self) -> int:
        return len(self.discrete_indices) + len(self.continuous_indices)

    def validate_vector(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        if x.shape != (self.p,):
            raise DimensionError(f"covariate vector has shape {x.shape}, expected ({self.p},)")
        for i in self.discrete_indices:
            if x[i] not in (0.0, 1.0):
                raise SchemaError(f"discrete coordinate {i} is {x[i]!r}, expected 0 or 1")
        for i, (lo, hi) in zip(self.continuous_indices, self.ranges):
            if not lo <= x[i] <= hi:
                raise SchemaError(f"continuous coordinate {i}={x[i]!r} outside [{lo}, {hi}]")

    def to_json_dict(self) -> dict:
        return {
            "discrete_indices": list(self.discrete_indices),
            "continuous_indices": list(self.continuous_indices),
            "bernoulli_rates": list(self.bernoulli_rates),
            "ranges": [list(r) for r in self.ranges],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CovariateSchema":
        return cls(
            discrete_indices=tuple(d["discrete_indices"]),
            continuous_indices=tuple(d["continuous_indices"]),
            bernoulli_rates=tuple(d["bernoulli_rates"]),
            ranges=tuple((lo, hi) for lo, hi in d["ranges"]),
        )


def default_schema() -> CovariateSchema:
    """HIV-flavoured default: 24 indicator features and 8 continuous ones.

    Indicators cover demographics, risk-group membership, prior drug-class
    exposure and resistance-mutation flags. Continuous features (baseline
    viral load, CD4 count, age, years since diagnosis, BMI, prior lines,
    adherence, lab composite) are stored min-max normalised to [0, 1] so
    the mean-absolute component of the mixed distance stays commensurate
    with the Jaccard component and distances live in [0, 1].
    """
    rates = (
        0.50, 0.35, 0.20, 0.15, 0.30, 0.25, 0.10, 0.40,
        0.15, 0.20, 0.30, 0.10, 0.25, 0.05, 0.20, 0.15,
        0.35, 0.10, 0.20, 0.25, 0.15, 0.30, 0.05, 0.10,
    )
    ranges = ((0.0, 1.0),) * 8
    return CovariateSchema(
        discrete_indices=tuple(range(24)),
        continuous_indices=tuple(range(24, 32)),
        bernoulli_rates=rates,
        ranges=ranges,
    )


@dataclass(frozen=True)
class TreatmentSet:
    """Non-empty subset of the k available treatments, stored as a bitmask."""

    mask: int
    k: int

    def __post_init__(self):
        if not 1 <= self.k <= MAX_TREATMENTS:
            raise ConfigError(f"k={self.k} outside [1, {MAX_TREATMENTS}]")
        if self.mask <= 0:
            raise ContractError("treatment set must be non-empty")
        if self.mask >= (1 << self.k):
            raise ContractError(f"mask {self.mask} has bits beyond treatment {self.k - 1}")

    @classmethod
    def from_indices(cls, indices, k: int) -> "TreatmentSet":
        mask = 0
        for i in indices:
            mask |= 1 << int(i)
        return cls(mask, k)

    @classmethod
    def full(cls, k: int) -> "TreatmentSet":
        return cls((1 << k) - 1, k)

    def indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.k) if self.mask >> i & 1)

    def contains(self, j: int) -> bool:
        return bool(self.mask >> j & 1)

    @property
    def size(self) -> int:
        return bin(self.mask).count("1")


@dataclass(frozen=True)
class Unit:
    """One observed sample: covariates, observed treatments, factual outcome."""

    id: int
    x: np.ndarray
    treatments: TreatmentSet
    outcome: float


@dataclass
class Dataset:
    schema: CovariateSchema
    k: int
    units: list[Unit]
    seed: int

    @property
    def n(self) -> int:
        return len(self.units)

    def covariate_matrix(self) -> np.ndarray:
        return np.array([u.x for u in self.units])

    def mask_array(self) -> np.ndarray:
        return np.array([u.treatments.mask for u in self.units], dtype=np.int64)

    def outcome_array(self) -> np.ndarray:
        return np.array([u.outcome for u in self.units])

    def validate(self) -> None:
        ids = set()
        for u in self.units:
            if u.id in ids:
                raise ContractError(f"duplicate unit id {u.id}")
            ids.add(u.id)
            self.schema.validate_vector(u.x)
            if u.treatments.k != self.k:
                raise ContractError(f"unit {u.id} declares k={u.treatments.k}, dataset k={self.k}")


@dataclass(frozen=True)
class SingleOutcomeModel:
    """Per-treatment outcome model: centroid + truncated-Gaussian level."""

    centroid: np.ndarray
    mean: float
    sd: float
    lower: float
    upper: float


@dataclass(frozen=True)
class SimulationConfig:
    n: int
    k: int
    assignment_bias: float = 0.0
    seed: int = 0
    schema: CovariateSchema | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n={self.n} must be >= 1")
        if not 1 <= self.k <= MAX_TREATMENTS:
            raise ConfigError(f"k={self.k} outside [1, {MAX_TREATMENTS}]")
        if self.assignment_bias < 0:
            raise ConfigError(f"assignment bias {self.assignment_bias} must be >= 0")

    def resolved_schema(self) -> CovariateSchema:
        return self.schema if self.schema is not None else default_schema()


# ---------------------------------------------------------------------------
# primitive operations


def gen_covariates(schema: CovariateSchema, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n covariate vectors; returns an (n, p) matrix, one row per unit.

    A single uniform block is drawn and transformed column-wise, so the
    first rows of a larger draw coincide with a smaller draw from the same
    generator state (useful for nested sample-size sweeps).
    """
    if n < 1:
        raise ConfigError(f"n={n} must be >= 1")
    u = rng.random((n, schema.p))
    x = np.empty((n, schema.p))
    for i, rate in zip(schema.discrete_indices, schema.bernoulli_rates):
        x[:, i] = (u[:, i] < rate).astype(float)
    for i, (lo, hi) in zip(schema.continuous_indices, schema.ranges):
        x[:, i] = lo + u[:, i] * (hi - lo)
    return x


def mixed_distance(x1: np.ndarray, x2: np.ndarray, schema: CovariateSchema) -> float:
    """Jaccard distance on indicators plus mean absolute distance on the rest,
    each weighted by its share of the covariate dimensions."""
    p = schema.p
    if np.shape(x1) != (p,) or np.shape(x2) != (p,):
        raise DimensionError("covariate vectors do not match the schema dimension")
    d_idx = schema.discrete_indices
    c_idx = schema.continuous_indices
    total = 0.0
    if d_idx:
        a = x1[list(d_idx)] > 0.5
        b = x2[list(d_idx)] > 0.5
        union = int(np.count_nonzero(a | b))
        if union == 0:
            jaccard = 0.0  # both indicator sets empty
        else:
            jaccard = 1.0 - np.count_nonzero(a & b) / union
        total += len(d_idx) / p * jaccard
    if c_idx:
        mean_abs = float(np.mean(np.abs(x1[list(c_idx)] - x2[list(c_idx)])))
        total += len(c_idx) / p * mean_abs
    return total


def _distances_to_points(x: np.ndarray, points: np.ndarray, schema: CovariateSchema) -> np.ndarray:
    """mixed_distance of x against each row of points, vectorised."""
    d_idx = list(schema.discrete_indices)
    c_idx = list(schema.continuous_indices)
    p = schema.p
    out = np.zeros(len(points))
    if d_idx:
        a = x[d_idx] > 0.5
        bs = points[:, d_idx] > 0.5
        inter = np.count_nonzero(bs & a, axis=1)
        union = np.count_nonzero(bs | a, axis=1)
        jac = np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 0.0)
        out += len(d_idx) / p * jac
    if c_idx:
        out += len(c_idx) / p * np.mean(np.abs(points[:, c_idx] - x[c_idx]), axis=1)
    return out


def select_archetypes(population: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample k archetype vectors uniformly with replacement from the population."""
    if len(population) == 0:
        raise ConfigError("archetype selection needs a non-empty population")
    if k < 1:
        raise ConfigError(f"k={k} must be >= 1")
    idx = rng.integers(0, len(population), size=k)
    return np.array(population[idx])


def _weighted_sample_without_replacement(weights: np.ndarray, m: int, rng) -> list[int]:
    # Sequential draws with renormalisation; falls back to uniform over the
    # remainder if every remaining weight underflowed to zero.
    weights = weights.astype(float).copy()
    chosen = []
    for _ in range(m):
        total = weights.sum()
        if total <= 0.0:
            live = np.flatnonzero(weights >= 0)
            probs = np.where(weights >= 0, 1.0, 0.0)
            probs[chosen] = 0.0
            probs /= probs.sum()
        else:
            probs = weights / total
        j = int(rng.choice(len(weights), p=probs))
        chosen.append(j)
        weights[j] = 0.0
    return chosen


def assign_treatments(
    x: np.ndarray,
    archetypes: np.ndarray,
    schema: CovariateSchema,
    assignment_bias: float,
    rng: np.random.Generator,
) -> TreatmentSet:
    """Draw an observed treatment subset for one unit.

    Subset size m = min(Poisson(2)+1, k); members are drawn without
    replacement with probability softmax(-bias * distance(x, archetype)),
    so zero bias is uniform and higher bias favours nearby archetypes.
    """
    if assignment_bias < 0:
        raise ConfigError("assignment bias must be >= 0")
    k = len(archetypes)
    m = min(int(rng.poisson(EXTRA_TREATMENT_RATE)) + 1, k)
    d = _distances_to_points(x, archetypes, schema)
    logits = -assignment_bias * d
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    chosen = _weighted_sample_without_replacement(weights, m, rng)
    return TreatmentSet.from_indices(chosen, k)


def treatment_weights(
    x: np.ndarray, archetypes: np.ndarray, schema: CovariateSchema, assignment_bias: float
) -> np.ndarray:
    """The softmax(-bias * distance) selection weights used by assignment."""
    d = _distances_to_points(x, archetypes, schema)
    logits = -assignment_bias * d
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def truncated_normal(
    rng: np.random.Generator,
    mean: float,
    sd: float,
    lower: float,
    upper: float,
    size: int | None = None,
):
    """Normal(mean, sd) conditioned on (lower, upper), by rejection."""
    if not lower < upper:
        raise ConfigError(f"truncation bounds ({lower}, {upper}) must satisfy lower < upper")
    if size is None:
        for _ in range(10_000):
            y = rng.normal(mean, sd)
            if lower < y < upper:
                return float(y)
        raise RuntimeError("truncated-normal rejection failed to converge; check the bounds")
    out = np.empty(size)
    remaining = np.arange(size)
    for _ in range(10_000):
        draws = rng.normal(mean, sd, size=len(remaining))
        ok = (draws > lower) & (draws < upper)
        out[remaining[ok]] = draws[ok]
        remaining = remaining[~ok]
        if len(remaining) == 0:
            return out
    raise RuntimeError("truncated-normal rejection failed to converge; check the bounds")


def build_single_outcome_model(
    population: np.ndarray, rng: np.random.Generator
) -> SingleOutcomeModel:
    """Sample one per-treatment outcome model from the generated population."""
    if len(population) == 0:
        raise ConfigError("outcome model needs a non-empty population")
    centroid = np.array(population[int(rng.integers(0, len(population)))])
    centroid.flags.writeable = False
    mean = float(rng.uniform(OUTCOME_LOWER, OUTCOME_UPPER))
    return SingleOutcomeModel(
        centroid=centroid,
        mean=mean,
        sd=SINGLE_OUTCOME_SD,
        lower=OUTCOME_LOWER,
        upper=OUTCOME_UPPER,
    )


def single_outcome(
    model: SingleOutcomeModel,
    x: np.ndarray,
    schema: CovariateSchema,
    rng: np.random.Generator,
) -> float:
    """Truncated-Gaussian level scaled by the unit's distance to the centroid."""
    level = truncated_normal(rng, model.mean, model.sd, model.lower, model.upper)
    return level * mixed_distance(x, model.centroid, schema)


def sample_combo_coefficients(k: int, rng: np.random.Generator) -> dict[int, float]:
    """Interaction coefficient for every treatment subset of size 2..min(k, 5).

    Keys are subset bitmasks. Roughly 80% of coefficients are gated to
    exactly zero; the rest are Gaussian with degree-scaled moments.
    """
    if k < 1:
        raise ConfigError(f"k={k} must be >= 1")
    coeffs: dict[int, float] = {}
    for degree in range(2, min(k, MAX_INTERACTION_DEGREE) + 1):
        loc = INTERACTION_SCALE_BASE ** (degree - 1) * INTERACTION_MEAN
        scale = INTERACTION_SCALE_BASE ** (degree - 2) * INTERACTION_SD
        for subset in combinations(range(k), degree):
            gate = rng.uniform() < INTERACTION_RATE
            draw = rng.normal(loc, scale)
            mask = 0
            for j in subset:
                mask |= 1 << j
            coeffs[mask] = float(draw) if gate else 0.0
    return coeffs


# ---------------------------------------------------------------------------
# the oracle


@dataclass(frozen=True)
class OutcomeOracle:
    """Frozen ground-truth state; answers counterfactual queries for any
    (unit, non-empty treatment subset) pair, reproducibly.

    The truncated-Gaussian level of treatment j for unit i is drawn from a
    substream labelled (seed, "single-outcome", i, j), so queries are
    independent of evaluation order and never need 2^k stored outcomes.
    """

    schema: CovariateSchema
    k: int
    archetypes: np.ndarray
    models: tuple[SingleOutcomeModel, ...]
    interaction_coeffs: dict[int, float]
    assignment_bias: float
    seed: int
    _singles_cache: dict = field(
        default_factory=dict, repr=False, compare=False, hash=False
    )

    def __post_init__(self):
        if len(self.models) != self.k:
            raise ConfigError("exactly one outcome model required per treatment")

    def single_level(self, unit_id: int, treatment: int) -> float:
        """The unscaled truncated-Gaussian draw for (unit, treatment)."""
        model = self.models[treatment]
        rng = substream(self.seed, "single-outcome", int(unit_id), int(treatment))
        return truncated_normal(rng, model.mean, model.sd, model.lower, model.upper)

    def _singles(self, x: np.ndarray, unit_id: int) -> np.ndarray:
        cached = self._singles_cache.get(unit_id)
        if cached is not None:
            return cached
        singles = np.empty(self.k)
        for j in range(self.k):
            singles[j] = self.single_level(unit_id, j) * mixed_distance(
                x, self.models[j].centroid, self.schema
            )
        self._singles_cache[unit_id] = singles
        return singles

    def _combine(self, singles: np.ndarray, mask: int) -> float:
        active = [j for j in range(self.k) if mask >> j & 1]
        total = 0.0
        for j in active:
            total += singles[j]
        degree = min(len(active), MAX_INTERACTION_DEGREE)
        for size in range(2, degree + 1):
            for subset in combinations(active, size):
                sub_mask = 0
                for j in subset:
                    sub_mask |= 1 << j
                b = self.interaction_coeffs[sub_mask]
                if b != 0.0:
                    prod = 1.0
                    for j in subset:
                        prod *= singles[j]
                    total += b * prod
        return total

    def counterfactual(self, unit: Unit, treatments: TreatmentSet) -> float:
        """Ground-truth outcome for the unit under the given treatment subset."""
        if treatments.mask <= 0:
            raise ContractError("counterfactual query needs a non-empty treatment set")
        if treatments.mask >= (1 << self.k):
            raise ContractError("treatment set exceeds the available treatments")
        return self._combine(self._singles(unit.x, unit.id), treatments.mask)

    def counterfactual_row(self, unit: Unit) -> np.ndarray:
        """Outcomes for every non-empty subset, indexed by bitmask - 1."""
        singles = self._singles(unit.x, unit.id)
        out = np.empty((1 << self.k) - 1)
        for mask in range(1, 1 << self.k):
            out[mask - 1] = self._combine(singles, mask)
        return out

    def counterfactual_matrix(self, units) -> np.ndarray:
        return np.array([self.counterfactual_row(u) for u in units])


def combined_outcome(oracle: OutcomeOracle, x: np.ndarray, unit_id: int, treatments: TreatmentSet) -> float:
    """Sum of single-treatment outcomes plus coefficient-weighted products
    over active subsets of size 2..min(|T|, 5)."""
    if treatments.mask <= 0:
        raise ContractError("combined outcome needs a non-empty treatment set")
    singles = oracle._singles(x, unit_id)
    return oracle._combine(singles, treatments.mask)


def counterfactual_outcome(oracle: OutcomeOracle, unit: Unit, treatments: TreatmentSet) -> float:
    return oracle.counterfactual(unit, treatments)


# ---------------------------------------------------------------------------
# dataset assembly


def generate_dataset(config: SimulationConfig) -> tuple[Dataset, OutcomeOracle]:
    """Run the full generative pipeline; returns (observable data, oracle)."""
    schema = config.resolved_schema()
    n, k, seed = config.n, config.k, config.seed

    x_all = gen_covariates(schema, n, substream(seed, "covariates"))
    archetypes = select_archetypes(x_all, k, substream(seed, "archetypes"))
    archetypes.flags.writeable = False

    model_rng = substream(seed, "outcome-models")
    models = tuple(build_single_outcome_model(x_all, model_rng) for _ in range(k))
    coeffs = sample_combo_coefficients(k, substream(seed, "interactions"))

    oracle = OutcomeOracle(
        schema=schema,
        k=k,
        archetypes=archetypes,
        models=models,
        interaction_coeffs=coeffs,
        assignment_bias=config.assignment_bias,
        seed=seed,
    )

    units = []
    for i in range(n):
        x = x_all[i]
        observed = assign_treatments(
            x, archetypes, schema, config.assignment_bias, substream(seed, "assignment", i)
        )
        y = combined_outcome(oracle, x, i, observed)
        units.append(Unit(id=i, x=x, treatments=observed, outcome=y))

    dataset = Dataset(schema=schema, k=k, units=units, seed=seed)
    return dataset, oracle
