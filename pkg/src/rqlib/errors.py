"""Exception types shared across the library."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidMaskError(ValueError):
    """A softmax row has no unmasked entry."""


class ValidationError(ValueError):
    """An input fails a documented precondition (e.g. malformed distribution)."""


class EvaluationError(RuntimeError):
    """A function produced a non-finite value where a finite one is required."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses or gradients."""


class InsufficientDataError(ValueError):
    """Not enough samples to perform the requested initialization."""


class FormatError(ValueError):
    """A serialized artifact is malformed or has the wrong magic bytes."""


class ArtifactMismatchError(RuntimeError):
    """Two artifacts (codebook/codec/code map/model) do not belong together."""


class ConfigError(ValueError):
    """A run configuration is invalid or incomplete."""
