"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/parse problems exit 2,
numeric failures exit 3.
"""


class MfqlError(Exception):
    """Base class for package errors."""


class ConfigError(MfqlError):
    """Invalid configuration: bad spec, unknown key, missing file."""


class ShapeError(MfqlError):
    """Array arguments with inconsistent shapes."""


class NumericError(MfqlError):
    """Non-finite values where finite ones are required."""


class DataFormatError(MfqlError):
    """Malformed dataset/metrics file; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(MfqlError):
    """Argument outside a function's mathematical domain."""
