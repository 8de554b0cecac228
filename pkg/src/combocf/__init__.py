"""Counterfactual outcome estimation for combinations of concurrent treatments.

The package bundles a deterministic synthetic-data simulator with ground
truth counterfactuals, a branched neural estimator whose per-treatment
interaction layers compose over the active treatment set, balanced-batch
matching against treatment assignment bias, composite ridge/kNN baselines,
and an evaluation/sweep harness with a CLI.
"""

from .baselines import (
    CompositeModel,
    fit_composite_knn,
    fit_composite_ridge,
    knn_predict,
    ridge_fit,
)
from .errors import (
    CombocfError,
    ConfigError,
    ContractError,
    DataError,
    DegenerateDataError,
    DimensionError,
    SchemaError,
    SearchFailedError,
    StateError,
    TrainingDivergedError,
)
from .evalstats import (
    MetricReport,
    MWWResult,
    bootstrap_ci,
    counterfactual_rmse,
    factual_rmse,
    mww_test,
)
from .harness import (
    BenchmarkResult,
    ExperimentConfig,
    hpo_search,
    run_benchmark,
    run_sweep,
    split_dataset,
)
from .matching import (
    BalancingProjector,
    balanced_batches,
    build_balanced_batch,
    fit_projector,
    project,
)
from .ncore import NCoREConfig, NCoREModel, Prediction, build, train
from .simcore import (
    CovariateSchema,
    Dataset,
    OutcomeOracle,
    SimulationConfig,
    TreatmentSet,
    Unit,
    assign_treatments,
    combined_outcome,
    counterfactual_outcome,
    default_schema,
    gen_covariates,
    generate_dataset,
    mixed_distance,
    sample_combo_coefficients,
    select_archetypes,
    single_outcome,
    truncated_normal,
)

__version__ = "0.1.0"
