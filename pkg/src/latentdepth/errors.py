"""Shared exception types.

Exit-code mapping for the CLI lives in cli.py: config/usage -> 2,
integrity -> 3, data -> 4.
"""


class LatentDepthError(Exception):
    """Base class for all package errors."""


class DimensionError(LatentDepthError):
    """Array shapes do not conform for the requested operation."""


class ConfigError(LatentDepthError):
    """Invalid or inconsistent configuration."""


class UsageError(LatentDepthError):
    """An API was called outside its contract."""


class DataError(LatentDepthError):
    """Input data violates its invariants (bad depths, empty masks, ...)."""


class IntegrityError(LatentDepthError):
    """A stored artifact failed a checksum or layout validation."""
