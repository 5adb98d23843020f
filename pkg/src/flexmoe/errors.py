"""Exception hierarchy shared by every flexmoe module."""


class FlexError(Exception):
    """Base class for all library errors."""


class DimensionError(FlexError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(FlexError, ArithmeticError):
    """An op produced NaN/Inf, or was fed a non-finite gradient."""


class ConfigError(FlexError, ValueError):
    """Invalid configuration value or cross-field constraint."""


class LifecycleError(FlexError, RuntimeError):
    """An object was used before it was initialised (or after it was consumed)."""


class InputError(FlexError, ValueError):
    """Malformed user input, e.g. an out-of-vocabulary token id."""


class CalibrationError(FlexError, ValueError):
    pass


class ProtocolError(FlexError, RuntimeError):
    """Client/server exchange violated the federation protocol."""


class InvariantViolation(FlexError, AssertionError):
    pass


class CheckpointError(FlexError, IOError):
    """Checkpoint file is truncated, corrupted, or of an unsupported version."""


class EmptyCorpusError(FlexError, ValueError):
    pass


class DecodeError(FlexError, ValueError):
    pass
