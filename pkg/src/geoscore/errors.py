"""Exception types raised across the package."""


class GeoScoreError(Exception):
    """Base class for all package errors."""


class ManifestError(GeoScoreError):
    """A manifest file is missing, malformed, or references missing files."""


class NormalsOnlyViolation(ManifestError):
    """An abnormal slice was placed in the train or validation split."""


class MissingMask(ManifestError):
    """An abnormal test slice has no ground-truth mask."""


class SliceFormatError(GeoScoreError):
    """An image file cannot be used as a slice."""


class NotSquare(SliceFormatError):
    pass


class BadSliceSize(SliceFormatError):
    """Slice side is not divisible by 8."""


class InsufficientForeground(GeoScoreError):
    """Not enough non-zero pixels to place two disjoint swap patches."""


class ConfigError(GeoScoreError, ValueError):
    """Invalid configuration value."""


class DivergenceDetected(GeoScoreError):
    """Non-finite gradient or loss encountered during optimization."""


class CorruptCheckpoint(GeoScoreError):
    """Checkpoint file is truncated, unreadable, or of the wrong version."""


class CheckpointMismatch(GeoScoreError):
    """Checkpoint was written for an incompatible configuration."""
