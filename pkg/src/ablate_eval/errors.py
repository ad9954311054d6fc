"""Exception hierarchy.

Validation problems (bad inputs, mismatched grids, unreadable files) and
numerical failures are kept apart so the CLI can map them to distinct exit
codes.
"""


class AblateEvalError(Exception):
    """Base class for all package errors."""


class ValidationError(AblateEvalError, ValueError):
    pass


class GridMismatchError(ValidationError):
    pass


class VolumeIOError(ValidationError):
    pass


class UnsupportedGeometryError(VolumeIOError):
    pass


class LungNotFoundError(AblateEvalError):
    pass


class NumericalError(AblateEvalError, ArithmeticError):
    pass
