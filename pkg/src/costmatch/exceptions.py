"""Exception hierarchy."""


class CostMatchError(Exception):
    """Base class for all package errors."""


class ConfigError(CostMatchError, ValueError):
    """Invalid configuration or argument."""


class NumericalError(CostMatchError):
    """A rollout left the valid state domain.

    ``stage`` is the rollout stage (or plant step) at which it happened, if known.
    """

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class EulerSingular(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class SolveFailed(CostMatchError):
    """The deployment solver could not reach the state-constraint tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InsufficientData(CostMatchError):
    pass


class WindowOutOfRange(CostMatchError):
    pass
