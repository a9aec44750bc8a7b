"""Exception types shared across the package."""


class StitchError(Exception):
    """Base class for all panostitch errors."""


class DomainError(StitchError):
    """An argument violates an operation's domain (bad shape, range, or state)."""


class DegenerateFitError(StitchError):
    """A least-squares fit has a rank-deficient design matrix."""


class NonFiniteLossError(StitchError):
    """Optimization produced a NaN or infinite loss value."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(StitchError):
    """A configuration file or value could not be parsed or validated."""
