"""Exception types shared across the package."""


class SetAdaptError(Exception):
    """Base class for errors raised by setadapt."""


class DimensionError(SetAdaptError, ValueError):
    """Operand shapes do not agree."""


class ContractError(SetAdaptError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(SetAdaptError, ValueError):
    """Invalid configuration value."""


class NumericError(SetAdaptError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class SamplingError(SetAdaptError, ValueError):
    """Not enough classes or instances to draw the requested episode."""


class UnsupportedProtocolError(SetAdaptError, ValueError):
    """The model cannot run the requested evaluation protocol."""


class FormatError(SetAdaptError, ValueError):
    """A file could not be parsed or fails validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IncompatibleVersionError(FormatError):
    """A file was written with an unsupported format version."""


class SchemaError(FormatError):
    """Parsed content disagrees with the declared header."""


class IntegrityError(FormatError):
    """A binary file is truncated or its checksum does not match."""
