"""Exception hierarchy shared by every module."""


class QuantRLError(Exception):
    """Base class for all errors raised by quant_rl."""


class SchemaError(QuantRLError, ValueError):
    pass


class EmptyInputError(QuantRLError, ValueError):
    pass


class DuplicateError(QuantRLError, ValueError):
    pass


class ParseError(QuantRLError, ValueError):
    pass


class InsufficientHistoryError(QuantRLError, ValueError):
    pass


class LeakageError(QuantRLError, ValueError):
    """Raised when train/test/trade intervals overlap or are out of order."""


class EmptyWindowError(QuantRLError, ValueError):
    pass


class ShapeError(QuantRLError, ValueError):
    pass


class DomainError(QuantRLError, ValueError):
    pass


class TooShortError(QuantRLError, ValueError):
    pass


class DegenerateSeriesError(QuantRLError, ValueError):
    """Statistic undefined because the series has zero variance or too few points."""


class NumericError(QuantRLError, ArithmeticError):
    pass


class DivergenceError(QuantRLError, ValueError):
    pass


class ModeError(QuantRLError, ValueError):
    pass


class UnsupportedAlgorithmError(QuantRLError, ValueError):
    pass


class IncompatibilityError(QuantRLError, ValueError):
    pass


class EnvError(QuantRLError, RuntimeError):
    pass


class InfeasiblePlanError(QuantRLError, ValueError):
    pass


class ConfigError(QuantRLError, ValueError):
    pass
