"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit with 2, data
problems with 3 and numeric failures with 4.
"""


class TopodiffError(Exception):
    exit_code = 1


class ConfigError(TopodiffError, ValueError):
    exit_code = 2


class ShapeError(TopodiffError, ValueError):
    """Input arrays have incompatible shapes or contents."""

    exit_code = 2


class UsageError(TopodiffError, RuntimeError):
    """An API was called out of order or outside its supported range."""

    exit_code = 2


class DataError(TopodiffError, IOError):
    exit_code = 3


class NumericError(TopodiffError, ArithmeticError):
    """A loss, gradient or intermediate value went non-finite."""

    exit_code = 4


class FrozenParameterError(TopodiffError, RuntimeError):
    exit_code = 4
