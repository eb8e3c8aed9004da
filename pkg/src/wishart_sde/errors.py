"""Exception hierarchy shared by every module."""


class WishartSDEError(Exception):
    pass


class ContractError(WishartSDEError, ValueError):
    """An argument violates an operation's preconditions."""


class DimensionError(ContractError):
    """Shapes of operands do not agree."""


class NumericalError(WishartSDEError, ArithmeticError):
    """A factorisation or square root failed.

    ``pivot`` holds the index of the first non-positive pivot when the
    failure came from a Cholesky factorisation.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SingularityError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """An SDE path left the finite reals."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class TrainingError(WishartSDEError, RuntimeError):
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class ParseError(WishartSDEError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(WishartSDEError, ValueError):
    pass


class ConfigError(ContractError):
    """A run configuration is invalid; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
