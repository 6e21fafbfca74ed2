"""Exception hierarchy shared across the codec."""


class CodecError(Exception):
    """Base class for all codec errors."""


class ContractError(CodecError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(CodecError, ValueError):
    """Tensor extents do not fit together."""


class ConfigError(CodecError, ValueError):
    """An invalid or inconsistent configuration."""


class ParameterError(CodecError, ValueError):
    """A parameter is outside its valid domain (e.g. a nonpositive step)."""


class StreamError(CodecError):
    """A coded payload or container is malformed, truncated or corrupt."""


class ChecksumError(StreamError):
    """The container CRC does not match its contents."""


class TrainingDiverged(CodecError, FloatingPointError):
    """The rate-distortion loss became non-finite."""


class ClosureError(CodecError):
    """A decoded stream does not reproduce the quality measured at training time."""
