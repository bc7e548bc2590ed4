"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError/ShapeError/CheckpointError
exit 1, DataError (incl. ParseError) exit 2, NumericError exit 3.
"""


class FrameAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(FrameAttnError):
    """Operand shapes violate an operation's contract."""


class ConfigError(FrameAttnError):
    """Invalid or inconsistent configuration."""


class DataError(FrameAttnError):
    """Input data violates the expected layout or value ranges."""


class ParseError(DataError):
    """Malformed CSV content; message carries file and line."""


class CheckpointError(FrameAttnError):
    """Unreadable, truncated, or incompatible checkpoint file."""


class NumericError(FrameAttnError):
    """Non-finite values encountered during optimization."""
