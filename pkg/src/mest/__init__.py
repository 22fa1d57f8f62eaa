"""Memory-economic sparse training toolkit."""

from .errors import (
    MestError, ShapeError, FeasibilityError, EncodingError, NumericError,
    FormatError,
)

__version__ = "0.1.0"

__all__ = [
    "MestError", "ShapeError", "FeasibilityError", "EncodingError",
    "NumericError", "FormatError", "__version__",
]
