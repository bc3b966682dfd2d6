"""Exception types shared across the package."""


class EdffdError(Exception):
    """Base class for every package-specific error."""


class TooCoarseError(EdffdError):
    """A pyramid level would fall below the 8x8 minimum."""


class TooSmallError(EdffdError):
    """Image smaller than the requested feature downsample factor."""


class EmptyMaskError(EdffdError):
    """Mask with zero total weight passed to a masked metric."""


class NonPositiveScaleError(EdffdError):
    """Exponential kernel scale theta*eta is not strictly positive."""


class DegenerateCornersError(EdffdError):
    """Corner correspondences leave the homography under-determined."""


class AtInfinityError(EdffdError):
    """Projective transform sent a point to (or near) the line at infinity."""


class SingularMatrixError(EdffdError):
    """Matrix inversion requested for a numerically singular matrix."""


class SingularSystemError(EdffdError):
    """A linear system (TPS or ridge fit) is numerically singular."""


class ZeroLengthEdgeError(EdffdError):
    """A grid edge participating in a collinearity term has near-zero length."""


class DimensionMismatchError(EdffdError):
    """Operands do not share the required dimensions."""


class NotDivisibleError(EdffdError):
    """Feature width is not divisible by the group count."""


class WidthMismatchError(EdffdError):
    """Layer widths of an aggregation head do not chain."""


class DivergenceError(EdffdError):
    """Training loss became non-finite."""


class InsufficientOverlapError(EdffdError):
    """Too few reliable correspondences survive for a homography fit."""


class SchemaError(EdffdError):
    """A parameter JSON document violates the documented schema."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"invalid or missing key: {key!r}")
