"""Exception types shared across the package."""


class DamcError(Exception):
    """Base class for package errors."""


class FormatError(DamcError):
    """Malformed file: bad magic, header, or payload shape."""


class EmptyInputError(DamcError):
    """Input contains no usable data (empty audio, audio shorter than one window)."""


class ConfigurationError(DamcError):
    """Weights / config do not match the expected architecture or shapes."""


class DatasetError(DamcError):
    """Dataset is unusable: missing files, hash mismatch, or degenerate labels."""


class UndefinedMetricError(DamcError):
    """Metric is undefined for the given inputs (e.g. zero variance)."""
