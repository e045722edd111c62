"""Exception types shared across the package."""


class ChainQAError(Exception):
    """Base class for all package errors."""


class DimensionError(ChainQAError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(ChainQAError):
    """A non-finite value (NaN/Inf) appeared in a computation."""


class ConfigurationError(ChainQAError):
    """A configuration value or module layout is invalid."""


class InputError(ChainQAError):
    """Caller-supplied data violates an operation's precondition."""


class StateError(ChainQAError):
    """Internal state is missing or inconsistent (e.g. gradient not populated)."""


class DecodeError(ChainQAError):
    """Span decoding found no feasible answer span."""


class ParseError(ChainQAError):
    """A file could not be parsed; the message names the offending location."""


class LocalizationError(ChainQAError):
    """A gold answer string could not be aligned to passage tokens."""


class SplitError(ChainQAError):
    """A grouped train split could not reach the requested sizes."""
