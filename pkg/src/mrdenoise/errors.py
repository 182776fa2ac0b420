"""Exception hierarchy shared by every module of the package."""


class DenoiseError(Exception):
    """Base class for all package errors."""


class ConfigError(DenoiseError, ValueError):
    """Invalid model, training, noise or phantom configuration."""


class DimensionError(DenoiseError, ValueError):
    """Tensor or volume shapes do not conform."""


class DegenerateVarianceError(DimensionError):
    """Normalisation over a single element with zero epsilon."""


class UninitializedStatsError(DenoiseError, RuntimeError):
    """Batch-norm evaluated before any running-statistics update."""


class TapeError(DenoiseError, RuntimeError):
    """Misuse of a differentiation tape (reuse, foreign or non-scalar loss)."""


class MissingGradientError(DenoiseError, RuntimeError):
    """A trainable parameter has no gradient at optimizer time."""


class NumericalError(DenoiseError, ArithmeticError):
    """Non-finite values appeared during training."""


class CoverageError(DenoiseError, ValueError):
    """Patch origins leave some voxel of the volume uncovered."""


class PlacementError(DenoiseError, RuntimeError):
    """A lesion could not be placed inside the tissue mask."""


class DomainError(DenoiseError, ValueError):
    """Input value outside the domain of an operation (e.g. negative magnitude)."""


class FormatError(DenoiseError, OSError):
    """Base class for on-disk container errors."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PayloadLengthError(FormatError):
    """Header shape and payload size disagree (trailing bytes or bad shape)."""
