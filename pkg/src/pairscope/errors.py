"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the command line front end can map
failures to distinct, documented process exit codes.
"""


class PairscopeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(PairscopeError):
    """Invalid parameter, shape, or configuration value."""

    exit_code = 2


class ConfigError(ValidationError):
    """A run configuration file failed validation."""


class TruncationError(ValidationError):
    """A discrete kernel support is too small to hold the requested mass."""


class FormatError(PairscopeError):
    """A binary or text file does not match its declared format."""

    exit_code = 3


class NoSignalError(PairscopeError):
    """Center search found no significant coincidence peak."""

    exit_code = 4


class InsufficientDataError(PairscopeError):
    """Too few frames or samples for the requested estimate."""

    exit_code = 4


class DegenerateImageError(PairscopeError):
    """An image has no dynamic range (max equals min)."""

    exit_code = 5


class UndefinedCnrError(PairscopeError):
    """Both CNR regions have zero variance."""

    exit_code = 5


class PlacementError(PairscopeError):
    """No valid jittered ROI placement could be found."""

    exit_code = 5
