"""Exception types shared across the package."""


class MestError(Exception):
    """Base class for package-specific failures."""


class ShapeError(MestError):
    """Tensor or mask dimensions do not line up."""


class FeasibilityError(MestError):
    """Requested sparsity / mutation target cannot be met under the scheme."""


class EncodingError(MestError):
    """A coordinate does not fit in the configured index width."""


class NumericError(MestError):
    """Non-finite value encountered where finiteness is required."""


class FormatError(MestError):
    """On-disk payload does not match the expected binary layout."""
