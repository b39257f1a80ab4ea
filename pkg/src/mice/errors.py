"""Exception taxonomy. Every failure the library raises deliberately derives from MiceError."""


class MiceError(Exception):
    """Base class for all errors raised by this package."""


class ZeroNormError(MiceError):
    """Vector norm below the 1e-12 floor where a direction is required."""


class EmptyInputError(MiceError):
    """An operation received an empty sequence where at least one element is required."""


class LengthMismatchError(MiceError):
    """Two vectors that must share a length do not."""


class DimensionMismatchError(MiceError):
    """Array shape incompatible with the shape the operation was built for."""


class NonPositiveTemperatureError(MiceError):
    """Temperature parameters must be strictly positive."""


class TapeMismatchError(MiceError):
    """Backward pass received upstream gradients that do not match the forward tape."""


class InvalidMomentumError(MiceError):
    """EMA momentum must lie in [0, 1)."""


class TooManyClustersError(MiceError):
    """Equiangular gating prototypes need K <= dim + 1."""


class LabelOutOfRangeError(MiceError):
    """Hard assignment outside {1..K}."""


class EmptyQueueError(MiceError):
    """Partition estimate requested before any block was enqueued."""


class DegenerateDistributionError(MiceError):
    """A probability row could not be normalized (non-finite unnormalized terms)."""


class NonFiniteLossError(MiceError):
    """Training produced a non-finite loss; carries epoch/step diagnostics in the message."""


class InvalidInputError(MiceError):
    """Input violates a documented precondition not covered by a more specific error."""


class FlagMismatchError(MiceError):
    """Operation requires a specific ablation-flag configuration."""


class CorruptCheckpointError(MiceError):
    """Checkpoint bytes are truncated, mis-tagged, or otherwise unreadable."""


class VersionMismatchError(MiceError):
    """Checkpoint format version is not the one this build writes."""


class ConfigError(MiceError):
    """Config file problem; message names the offending key or line."""


class ParseError(MiceError):
    """Dataset file could not be parsed; message carries the line number."""


class InvalidSpecError(MiceError):
    """Synthetic dataset spec fails validation."""
