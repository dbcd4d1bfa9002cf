"""Exception and warning types shared across koopdec."""


class KoopdecError(Exception):
    """Base class for all koopdec failures."""


class DimensionError(KoopdecError, ValueError):
    pass


class NonFiniteError(KoopdecError, ValueError):
    pass


class UnstableDynamicsError(KoopdecError):
    """Raised when an infinite-horizon sum would not converge."""


class ConvergenceError(KoopdecError):
    pass


class DivergenceError(KoopdecError):
    """A simulated trajectory left the admissible region."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InsufficientDataError(KoopdecError, ValueError):
    pass


class DegenerateSubsetError(KoopdecError, ValueError):
    """A subset score is undefined (empty/full subset or vanishing denominator)."""

    def __init__(self, message, subset=None):
        super().__init__(message)
        self.subset = subset


class PartitionError(KoopdecError):
    pass


class OracleTooLargeError(KoopdecError):
    pass


class ConfigError(KoopdecError, ValueError):
    pass


class RankDeficientWarning(UserWarning):
    """Least squares fell back to the minimum-norm pseudo-inverse solution."""


class UnreachableTargetWarning(UserWarning):
    pass


class TrainingDivergedWarning(UserWarning):
    pass
