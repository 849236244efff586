"""Exception and warning types raised across demfuse."""


class DemFuseError(Exception):
    """Base class for all demfuse errors."""


class GridParseError(DemFuseError, ValueError):
    """Malformed ASCII grid text (bad header key, bad value count)."""


class GeometryError(DemFuseError, ValueError):
    """Grids that must share a geometry do not."""


class InsufficientDataError(DemFuseError):
    """Too few valid samples for a statistical step."""


class FeatureMismatchError(DemFuseError, ValueError):
    """Feature columns of a table do not match what a model expects."""


class DivergenceError(DemFuseError):
    """Training or registration produced non-finite or non-overlapping results."""


class ModelFormatError(DemFuseError, ValueError):
    """A serialized model or transform file cannot be parsed."""


class DegenerateWarning(UserWarning):
    """A step fell back to a degenerate but defined result."""
