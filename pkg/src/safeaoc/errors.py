"""Exception types shared across the package."""


class SafeAocError(Exception):
    """Base class for all package-specific errors."""


class IntegrationFault(SafeAocError):
    """Non-finite derivative or state encountered during integration."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ContractViolation(SafeAocError):
    """An operation was called with inputs violating its precondition."""


class NoSolutionError(SafeAocError):
    """The requested solution does not exist (e.g. non-Hurwitz Lyapunov)."""


class NumericError(SafeAocError):
    """A linear system turned out singular or otherwise unsolvable."""


class RankDeficiencyError(SafeAocError):
    """Observability / controllability matrix is rank deficient."""


class ConfigError(SafeAocError):
    """Invalid or inconsistent configuration."""


class LearningFault(SafeAocError):
    """Non-finite quantity produced by a learning update."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ObserverFault(SafeAocError):
    """Non-finite observer state."""


class OrderingError(SafeAocError):
    """Samples arrived out of time order."""


class EmptyDataError(SafeAocError):
    """An operation requiring data received an empty collection."""
