"""Exception taxonomy shared across the toolkit.

Every error raised on purpose belongs to one of four categories so the CLI
can map failures to exit codes without string matching.
"""


class ForesightError(Exception):
    """Base class for all toolkit errors."""


class UsageError(ForesightError):
    """Caller broke an API contract (bad argument, wrong call order)."""


class DimensionError(UsageError):
    """Array shapes are inconsistent with the operation."""


class ConfigurationError(ForesightError):
    """A configuration value is invalid or internally inconsistent."""


class DataError(ForesightError):
    """Input data is malformed, missing, or unusable."""


class TrainingDivergedError(ForesightError):
    """Training produced a non-finite loss."""
