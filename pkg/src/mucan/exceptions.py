"""Exception types shared across the package."""


class MucanError(Exception):
    """Base class for all package errors."""


class ShapeError(MucanError, ValueError):
    pass


class ConfigError(MucanError, ValueError):
    pass


class ContractError(MucanError, ValueError):
    pass


class RetryWithNewSeed(MucanError):
    """Raised by the gradient checker when the evaluation point sits too close
    to a selection boundary (top-K / argmax switch, |x| kink)."""


class TrainingError(MucanError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
