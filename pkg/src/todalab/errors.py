"""Exception types raised by the lab."""


class TodaLabError(Exception):
    """Base class for all errors raised by this package."""


class GridMismatchError(TodaLabError, ValueError):
    pass


class NonFiniteStateError(TodaLabError, ValueError):
    pass


class WeightOverflowError(TodaLabError, OverflowError):
    pass


class TauBreakdownError(TodaLabError, ArithmeticError):
    """det(I + C) evaluated to a non-positive or non-finite value."""


class DerivativeMismatchError(TodaLabError):
    def __init__(self, message, analytic=None, numeric=None):
        super().__init__(message)
        self.analytic = analytic
        self.numeric = numeric


class BacklundValidationError(TodaLabError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SolvabilityError(TodaLabError):
    def __init__(self, message, pairing=None):
        super().__init__(message)
        self.pairing = pairing


class IllConditionedError(TodaLabError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ModulationError(TodaLabError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class ConfigError(TodaLabError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)
