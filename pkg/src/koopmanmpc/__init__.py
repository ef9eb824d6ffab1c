"""Input-augmented deep Koopman modeling and iterative convex MPC."""

from .errors import (
    ConfigError,
    ControlError,
    IntegrationDiverged,
    KoopmanMpcError,
    OptimizerError,
    RolloutDiverged,
    ShapeError,
    TrainingError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ControlError",
    "IntegrationDiverged",
    "KoopmanMpcError",
    "OptimizerError",
    "RolloutDiverged",
    "ShapeError",
    "TrainingError",
    "UsageError",
    "__version__",
]
