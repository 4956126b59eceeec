"""Typed error hierarchy shared by all codec components."""


class EdicError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EdicError):
    """Invalid hyper-parameters, mismatched shapes, or inconsistent wiring."""


class UsageError(EdicError):
    """API misuse, e.g. backward() on a non-scalar."""


class NumericError(EdicError):
    """Non-finite values where finite ones are required."""


class ModelError(EdicError):
    """Invalid probability-model parameters."""


class CoderError(EdicError):
    """Range-coder failure (symbol outside support, state corruption)."""


class DecodeError(CoderError):
    """Bitstream cannot be decoded (truncated or inconsistent)."""


class FormatError(EdicError):
    """Malformed container: bad magic, bad lengths, truncation."""


class VersionError(FormatError):
    """Container version not supported by this build."""
