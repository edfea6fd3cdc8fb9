"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`SemSegDepthError`
so callers (notably the CLI) can map failures to exit codes without
catching bare ``Exception``.
"""


class SemSegDepthError(Exception):
    """Base class for all package errors."""


class NoEligiblePoints(SemSegDepthError):
    """No depth pixel is both nonzero and within range; the frame is unusable."""


class OutOfBounds(SemSegDepthError):
    """A crop window exceeds the source extent."""


class MissingFile(SemSegDepthError):
    """A required dataset file does not exist."""


class InsufficientSamples(SemSegDepthError):
    """Requested split sizes exceed the number of available sample ids."""


class ShapeError(SemSegDepthError):
    """Input spatial size violates a divisibility requirement."""


class ShapeMismatch(SemSegDepthError):
    """Two inputs that must share a spatial extent do not."""


class EmptySparseDepth(SemSegDepthError):
    """A sparse depth map contains no measurements."""


class InvalidClassId(SemSegDepthError):
    """A label map contains a class id outside [0, nc) that is not the ignore id."""


class EmptyMask(SemSegDepthError):
    """A masked reduction has no pixels to reduce over."""


class EmptySplit(SemSegDepthError):
    """An evaluation split contains no samples."""


class UnknownVariant(SemSegDepthError):
    """A variant name is not in the registry."""


class MissingInput(SemSegDepthError):
    """A sample lacks a field the selected variant requires.

    ``field`` names the absent input.
    """

    def __init__(self, field: str):
        super().__init__(f"missing required input: {field}")
        self.field = field


class Divergence(SemSegDepthError):
    """Training produced a non-finite loss.  ``step`` records where."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss at step {step}: {value}")
        self.step = step
        self.value = value


class ConfigError(SemSegDepthError):
    """A run configuration is malformed.  ``key`` is the offending key path."""

    def __init__(self, key: str, reason: str = "unknown key"):
        super().__init__(f"config error at '{key}': {reason}")
        self.key = key
        self.reason = reason


class MissingCheckpoint(SemSegDepthError):
    """A checkpoint path does not exist or lacks required content."""


class UnknownColorWarning(UserWarning):
    """Semantic image contained colors absent from the class map.

    ``pixel_count`` is the number of affected pixels; they were assigned
    the background class.
    """

    def __init__(self, pixel_count: int):
        super().__init__(f"{pixel_count} semantic pixels had unmapped colors")
        self.pixel_count = pixel_count
