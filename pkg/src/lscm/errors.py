"""Exception hierarchy shared across the toolkit.

Command line behaviour depends on these classes: data, configuration and
estimation problems exit with code 1, numerical failures with code 2.
"""


class ToolkitError(Exception):
    """Base class for every error raised by this package."""


class DataError(ToolkitError):
    """Input data is malformed or internally inconsistent."""


class ParseError(DataError):
    """A delimited input file could not be parsed."""


class IntegrityError(DataError):
    """Parsed data violates a structural requirement (duplicate keys, time gaps)."""


class LayoutError(DataError):
    """An operation requires a regular spatial grid and the locations form none."""


class ConfigError(ToolkitError):
    """Invalid configuration, or options incompatible with the data."""


class EstimationError(ToolkitError):
    """An estimator cannot produce a result from the given data."""


class NumericalError(ToolkitError):
    """A numerical routine failed beyond recovery."""
