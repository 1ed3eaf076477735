"""Exception taxonomy shared across the package.

Contract and configuration problems map to CLI exit code 2,
data-integrity (leakage) problems to exit code 3.
"""


class ChronomodalError(Exception):
    """Base class for all package errors."""


class ShapeError(ChronomodalError):
    """Operand dimensions are incompatible."""


class NumericError(ChronomodalError):
    """A forward value or gradient became non-finite."""


class ContractError(ChronomodalError):
    """A caller violated an operation's precondition."""


class ConfigError(ChronomodalError):
    """An invalid configuration value."""


class DegenerateMaskError(ChronomodalError):
    """A softmax row had every entry masked out."""


class UndefinedMetricError(ChronomodalError):
    """Metric undefined for the given label distribution (single class)."""


class FormatError(ChronomodalError):
    """A binary artifact failed header or schema validation."""


class CorruptionError(FormatError):
    """A binary artifact is truncated or has trailing garbage."""


class LeakageError(ChronomodalError):
    """A sample's history contains data at or after its anchor time."""
