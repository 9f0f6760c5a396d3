"""Exception types raised across the package.

Every error condition with a documented contract gets its own class so
callers can catch precisely, and tests can assert on the type rather than
on message text.
"""


class ProtosegError(Exception):
    """Base class for all package errors."""


class ConstantVolume(ProtosegError):
    """Intensity normalization asked of a volume with zero variance."""


class PatchTooLarge(ProtosegError):
    """Requested crop patch exceeds the volume extent on some axis."""


class ShapeMismatch(ProtosegError):
    """Two arrays that must be spatially aligned have different shapes."""


class ShapeNotDivisible(ProtosegError):
    """Network input whose spatial dims the encoder cannot halve cleanly."""


class InvalidParam(ProtosegError):
    """A parameter outside its documented domain."""


class InvalidLabel(ProtosegError):
    """A class-index label outside [0, classes)."""


class EmptySplit(ProtosegError):
    """A dataset split that would contain zero labeled samples."""


class EmptyMask(ProtosegError):
    """Surface-distance computation on an empty mask."""


class DegeneratePrototypes(ProtosegError):
    """Fewer than two class prototypes available for similarity scoring."""


class NonFiniteLoss(ProtosegError):
    """Training step produced a NaN or infinite loss term."""

    def __init__(self, message: str, bundle=None):
        super().__init__(message)
        self.bundle = bundle
