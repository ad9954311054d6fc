"""Registration-based evaluation of lung tumor ablation on pre/post CT."""
__version__ = "0.1.0"

from .errors import (
    AblateEvalError,
    GridMismatchError,
    LungNotFoundError,
    NumericalError,
    UnsupportedGeometryError,
    ValidationError,
    VolumeIOError,
)
from .volume import DisplacementField, GridMeta, Mask, Volume

__all__ = [
    "AblateEvalError", "DisplacementField", "GridMeta", "GridMismatchError", "LungNotFoundError", "Mask",
    "NumericalError", "UnsupportedGeometryError", "ValidationError", "Volume", "VolumeIOError", "__version__",
]
