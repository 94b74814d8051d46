"""Exception hierarchy shared by all modules."""


class SpnMklError(Exception):
    """Base class for all library errors."""


class StructureError(SpnMklError, ValueError):
    """Malformed or invalid SPN structure document."""


class PathLimitError(SpnMklError):
    """Path enumeration would exceed the configured cap."""


class EmptyModelError(SpnMklError):
    """No path (or no nonzero path weight) survives."""


class ConfigError(SpnMklError, ValueError):
    """Invalid experiment or training configuration."""


class DataError(SpnMklError, ValueError):
    """Bad numeric input: non-finite values, dimension mismatch, parse failure."""


class DegenerateProblemError(SpnMklError):
    """The dual problem has no informative solution (e.g. a single class)."""


class ContinuityError(SpnMklError, ValueError):
    """A path with zero weight still carries a nonzero w-norm."""


class SingularGradientError(SpnMklError, ValueError):
    """Gradient is unbounded at the requested point."""


class ModelFormatError(SpnMklError):
    """Model file is unreadable or has an unsupported format version."""
