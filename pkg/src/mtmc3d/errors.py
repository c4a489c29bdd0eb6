"""Exception hierarchy shared by every stage of the tracker."""


class TrackerError(Exception):
    """Base class for all errors raised by mtmc3d."""


class ValidationError(TrackerError, ValueError):
    """Input violates a documented invariant (bad file, bad config, bad value)."""


class DataError(TrackerError):
    """Input is well-formed but unusable at runtime (missing files, I/O)."""


class InvalidDepthError(ValidationError):
    pass


class BehindCameraError(ValidationError):
    pass


class PointAtInfinityError(ValidationError):
    pass


class UndefinedScoreError(ValidationError):
    """Raised when a metric has no ground truth to score against."""
