"""Exception types shared across the package."""


class FacialFlowError(Exception):
    """Base class for all errors raised by facialflow."""


class ShapeError(FacialFlowError, ValueError):
    """Array dimensions do not agree."""


class InvalidParameterError(FacialFlowError, ValueError):
    """A parameter is non-finite or outside its domain (e.g. scale <= 0)."""


class RangeError(FacialFlowError, ValueError):
    """A scalar option lies outside its documented range."""


class FormatError(FacialFlowError, ValueError):
    """A serialized file is malformed: bad magic, version or truncated payload."""


class OptimizationError(FacialFlowError, RuntimeError):
    """The optimizer diverged. ``trace`` holds the per-iteration losses seen so far."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)
