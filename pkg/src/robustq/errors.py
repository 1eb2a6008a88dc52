"""Exception types raised across the package."""


class RobustQError(Exception):
    pass


class ConfigError(RobustQError, ValueError):
    """Malformed model file. Carries the offending line and key when known."""

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ModelError(RobustQError, ValueError):
    pass


class CriticalLoadViolation(ModelError):
    pass


class OrderingViolation(ModelError):
    def __init__(self, message, indices=()):
        self.indices = tuple(indices)
        super().__init__(message)


class NegativeRate(ModelError):
    pass


class DomainError(RobustQError, ValueError):
    pass


class StepTooLarge(RobustQError, ValueError):
    pass


class NoConvergence(RobustQError, RuntimeError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class NonFiniteIntensity(RobustQError, FloatingPointError):
    pass


class IntensityNonpositive(RobustQError, ValueError):
    def __init__(self, message, min_n=None):
        self.min_n = min_n
        super().__init__(message)


class PolicyInfeasible(RobustQError, RuntimeError):
    pass


class MissingIntensityLog(RobustQError, ValueError):
    pass
