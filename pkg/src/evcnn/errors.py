"""Exception types shared across the package."""


class EvcnnError(Exception):
    """Base class for all errors raised by this package."""


class MalformedRecord(EvcnnError):
    """A stream record could not be parsed; carries the line/offset."""

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at {position})")
        self.position = position


class NonMonotoneTimestamp(EvcnnError):
    """Event timestamps must be non-decreasing."""


class CoordinateOutOfBounds(EvcnnError):
    """An event or query coordinate lies outside the sensor/layer grid."""


class ZeroWindow(EvcnnError):
    """Windowing requires a strictly positive window length."""


class NonFiniteInput(EvcnnError):
    """Activation inputs must be finite."""


class TimestampRegression(EvcnnError):
    """A batch carries timestamps older than the current state clock."""


class DimensionMismatch(EvcnnError):
    """Layer geometry is inconsistent with its input."""


class StaleState(EvcnnError):
    """An incoming layer delta refers to a different topology."""


class ShapeMismatch(EvcnnError):
    """Tensor or config shapes do not line up."""


class MissingTensor(EvcnnError):
    """A required tensor is absent from the weight container."""


class EmptyScene(EvcnnError):
    """A scene script defines no objects."""


class NonPositiveIntensity(EvcnnError):
    """Frame intensities must be positive when the zero floor is disabled."""
