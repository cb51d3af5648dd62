"""Exception hierarchy shared by every subsystem.

All library errors derive from DyadError so callers (and the CLI) can map
failures to exit codes without matching on message strings.
"""


class DyadError(Exception):
    """Base class for all library errors."""


class ShapeError(DyadError):
    """Operand shapes do not conform; message carries both shapes."""


class ContractError(DyadError):
    """A documented precondition was violated by the caller."""


class RangeError(DyadError):
    """An index, window, or token is outside its valid range."""


class EmptyInput(DyadError):
    """An operation received an empty sequence or dataset."""


class FormatError(DyadError):
    """A file does not conform to its documented on-disk format."""


class NumericalError(DyadError):
    """A computation produced non-finite or otherwise unusable values."""


class DegenerateInput(DyadError):
    """Input is valid but statistically degenerate (e.g. zero variance)."""


class ConfigError(DyadError):
    """A configuration value or combination is invalid."""


class IoError(DyadError):
    """A file could not be read or written."""
