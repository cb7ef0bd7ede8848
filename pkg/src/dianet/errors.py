"""Exception hierarchy shared by every subpackage."""


class DianetError(Exception):
    """Base class for domain errors (bad data, degenerate phases, bad configs)."""


class ShapeError(DianetError, ValueError):
    pass


class NonFiniteError(DianetError, FloatingPointError):
    """Raised when an operation on finite inputs produces NaN or Inf."""


class DegeneratePhaseError(DianetError, ValueError):
    """A phase segment would contain fewer than two frames."""

    side = "phase"

    def __init__(self, message, source_id=None):
        super().__init__(message)
        self.source_id = source_id


class OnsetDegenerateError(DegeneratePhaseError):
    side = "onset"


class OffsetDegenerateError(DegeneratePhaseError):
    side = "offset"


class IndexOutOfRangeError(DianetError, IndexError):
    pass


class DataFormatError(DianetError, ValueError):
    """Unreadable frame, malformed manifest, or bad raster file."""


class NotFittedError(DianetError, AttributeError):
    pass


class LeakageError(DianetError, RuntimeError):
    """A held-out subject also appears in the training or validation data."""
