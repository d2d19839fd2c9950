"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies instead of bare ValueError.
"""


class KgformerError(Exception):
    """Base class for all package errors."""


class ShapeError(KgformerError):
    """Tensor dimensions do not line up for the requested operation."""


class ContractError(KgformerError):
    """A documented precondition was violated by the caller."""


class ConfigError(KgformerError):
    """Invalid configuration value or combination."""


class ParseError(KgformerError):
    """A data file could not be parsed; message carries file and line."""


class NumericsError(KgformerError):
    """Training produced a non-finite quantity."""


class CheckpointFormatError(KgformerError):
    """Checkpoint file is corrupt, truncated, or not a checkpoint."""


class IncompatibleCheckpointError(KgformerError):
    """Checkpoint cannot initialize the requested model configuration."""
