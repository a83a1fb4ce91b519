"""Exception types shared across the package."""


class RflError(Exception):
    pass


class DimensionError(RflError, ValueError):
    """Operand shapes are incompatible."""


class InputError(RflError, ValueError):
    """Data handed to an operation violates its preconditions."""


class ContractError(RflError, RuntimeError):
    """An API was used outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(RflError, ValueError):
    pass


class FormatError(RflError, ValueError):
    """A file on disk does not match the expected binary/text layout."""


class InitError(RflError, ValueError):
    pass


class UnsupportedError(RflError, ValueError):
    pass


class UndefinedMetricError(RflError, ArithmeticError):
    pass


class DivergenceError(RflError, FloatingPointError):
    """Training produced a non-finite loss."""
