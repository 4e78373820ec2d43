"""Exception hierarchy shared by every module."""


class SageError(Exception):
    pass


class InvalidArgumentError(SageError, ValueError):
    pass


class DomainError(InvalidArgumentError):
    """A noise level lies where a formula is singular (sigma >= 1)."""


class SingularityError(SageError, ValueError):
    """Score requested at sigma = 0."""


class DegenerateDistributionError(SageError, ValueError):
    """A Gaussian with zero variance was asked for a density or a KL."""


class TrainingDivergedError(SageError, RuntimeError):
    pass


class RolloutDivergedError(SageError, RuntimeError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at sampling step {step}")


class CheckpointError(SageError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigError(SageError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class OracleError(SageError, ArithmeticError):
    pass
