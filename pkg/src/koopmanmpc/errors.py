"""Exception hierarchy shared across the package."""


class KoopmanMpcError(Exception):
    """Base class for all package errors."""


class ConfigError(KoopmanMpcError):
    """Invalid or infeasible configuration value."""


class ShapeError(KoopmanMpcError):
    """Array dimensions incompatible with the declared model dimensions."""


class UsageError(KoopmanMpcError):
    """API called out of order (e.g. backward before forward)."""


class IntegrationDiverged(KoopmanMpcError):
    """ODE integration produced a non-finite state."""

    def __init__(self, message, channel=None, step=None):
        super().__init__(message)
        self.channel = channel
        self.step = step


class RolloutDiverged(KoopmanMpcError):
    """Model rollout produced a non-finite prediction."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class OptimizerError(KoopmanMpcError):
    """Optimizer received a non-finite gradient."""

    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class TrainingError(KoopmanMpcError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ControlError(KoopmanMpcError):
    """Closed-loop control step failed."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
