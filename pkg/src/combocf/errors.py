"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration problems are usage
errors (1), malformed or invalid data files are data errors (2), and
everything else that escapes is a runtime failure (3).
"""


class CombocfError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CombocfError, ValueError):
    """Invalid configuration value (bad k, ratios, rates, ...)."""


class SchemaError(ConfigError):
    """Covariate schema violates its invariants."""


class DimensionError(CombocfError, ValueError):
    """Array shapes incompatible with the declared schema or layer."""


class ContractError(CombocfError, ValueError):
    """Call violates an operation precondition (e.g. empty treatment set)."""


class DataError(CombocfError):
    """A data file failed to parse or validate."""

    def __init__(self, message, row_errors=None):
        super().__init__(message)
        self.row_errors = list(row_errors or [])


class DegenerateDataError(DataError):
    """Input data carries no usable signal (e.g. zero covariance)."""


class StateError(CombocfError, RuntimeError):
    """Operation invoked in an invalid order (e.g. backward before forward)."""


class TrainingDivergedError(CombocfError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None, batch_index=None, hyperparameters=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.hyperparameters = dict(hyperparameters or {})


class SearchFailedError(CombocfError, RuntimeError):
    """Every hyperparameter-search run failed."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = list(records or [])
