"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric/tape failures exit 4.
"""


class SfunetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SfunetError):
    """Tensor dimensions violate an operation's contract."""


class TapeError(SfunetError):
    """Gradient tape misuse (backward without forward, nested tapes, ...)."""


class ConfigError(SfunetError):
    """Invalid model/training configuration or config file."""


class DataError(SfunetError):
    """Unreadable or inconsistent dataset files."""


class CheckpointError(SfunetError):
    """Malformed checkpoint file (bad magic, version, truncation)."""


class NumericError(SfunetError):
    """Non-finite values or an optimizer step without gradients."""
