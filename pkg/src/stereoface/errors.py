"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numeric failures exit 4.
"""


class StereoFaceError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(StereoFaceError, ValueError):
    exit_code = 2


class DataError(StereoFaceError):
    exit_code = 3


class NumericError(StereoFaceError, ArithmeticError):
    exit_code = 4


class ShapeError(StereoFaceError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    exit_code = 4
