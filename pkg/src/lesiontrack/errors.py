"""Exception types raised across the package."""


class LesionTrackError(Exception):
    """Base class for all package errors."""


class ParseError(LesionTrackError):
    """A header or table file is malformed."""


class SizeError(LesionTrackError):
    """Raw voxel payload length disagrees with the declared dimensions."""


class DataError(LesionTrackError):
    """File content parses but violates a data invariant (NaN, duplicate key, ...)."""


class InvalidCost(LesionTrackError):
    """Assignment cost matrix contains NaN or negative entries."""


class EmptyMask(LesionTrackError):
    """Binary preprocessing removed every voxel."""


class InsufficientRange(LesionTrackError):
    """An image has zero intensity range, so a histogram metric is undefined."""


class InsufficientOverlap(LesionTrackError):
    """Too few metric samples land inside the moving image."""


class DivergedError(LesionTrackError):
    """Optimization produced a non-finite metric value."""


class SpecError(LesionTrackError):
    """A phantom specification is inconsistent (e.g. lesion outside the body)."""


class OutOfBounds(LesionTrackError):
    """A requested focus point lies outside every supplied volume."""


class InputMismatch(LesionTrackError):
    """Scored tracks reference annotations that the truth set does not contain."""


class GeometryError(LesionTrackError):
    """Two volumes that must share a grid have different geometry."""
