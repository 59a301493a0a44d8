"""Exception hierarchy shared by every module."""


class SegmentationError(Exception):
    """Base class for all package errors."""


class ShapeError(SegmentationError, ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class ConfigError(SegmentationError, ValueError):
    """An architecture, training or generator configuration is invalid."""


class FormatError(SegmentationError, ValueError):
    """A file on disk is malformed or inconsistent with its declared schema."""


class NumericError(SegmentationError, ArithmeticError):
    """Non-finite values appeared during a numeric computation."""
