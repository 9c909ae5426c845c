"""Forest-height retrieval from L-band SAR backscatter and repeat-pass
coherence: physics-model fitting, feature stacks, convolutional
regressors, classical baselines, and a synthetic scene generator.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    ForesightError,
    TrainingDivergedError,
    UsageError,
)

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "ForesightError",
    "TrainingDivergedError",
    "UsageError",
    "__version__",
]
