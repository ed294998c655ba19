"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
ValidationError -> 3, TrainingError -> 4.
"""


class AdanasError(Exception):
    """Base class for all package errors."""

    category = "error"


class ShapeError(AdanasError):
    """Tensor dimensions do not match an operation's contract."""

    category = "shape"


class ConfigError(AdanasError):
    """Invalid configuration value or unknown configuration key."""

    category = "config"


class ValidationError(AdanasError):
    """Runtime input violates a documented precondition."""

    category = "validation"


class DataError(AdanasError):
    """A dataset or teacher file is malformed."""

    category = "data"


class TrainingError(AdanasError):
    """A training run failed to meet its contract (divergence, budget)."""

    category = "training"
