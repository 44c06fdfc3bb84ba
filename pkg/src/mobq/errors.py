"""Exception hierarchy shared by every module of the package."""


class MobqError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MobqError, ValueError):
    pass


class DomainError(MobqError, ValueError):
    """A point lies outside the domain on which a kernel or function is defined."""


class DegenerateDesignError(MobqError, ValueError):
    pass


class UnsupportedIdentityError(MobqError):
    """No closed-form kernel mean exists for this (kernel, measure) pair."""


class NotPositiveDefiniteError(MobqError, ArithmeticError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class ConsistencyError(MobqError, ArithmeticError):
    """A computed quantity violates an invariant by more than rounding allows."""


class OptimizationFailedError(MobqError, RuntimeError):
    pass


class SolverFailedError(MobqError, RuntimeError):
    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class AccuracyNotMetError(MobqError, RuntimeError):
    def __init__(self, message, best_estimate=None, error_estimate=None):
        super().__init__(message)
        self.best_estimate = best_estimate
        self.error_estimate = error_estimate


class InvalidDataError(MobqError, ValueError):
    pass


class ConfigError(MobqError, ValueError):
    pass
