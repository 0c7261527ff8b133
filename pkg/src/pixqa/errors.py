"""Exception types shared across the package."""


class PixqaError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(PixqaError):
    """A configuration value is inconsistent or unusable."""


class BudgetError(PixqaError):
    """A patch sequence exceeds the configured patch budget."""


class NumericError(PixqaError):
    """A forward or backward pass produced a non-finite value."""


class DataError(PixqaError):
    """A dataset resource (page image, annotation entry) is missing or corrupt."""


class AnnotationParseError(DataError):
    """An annotations file does not match the expected schema."""


class CheckpointError(PixqaError):
    """A checkpoint file is truncated, malformed, or inconsistent."""
