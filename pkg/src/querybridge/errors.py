"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value. CLI maps this to exit code 2."""


class DimensionMismatchError(ValueError):
    """Tensor shape incompatible with the declared contract."""


class SequenceTooLongError(ValueError):
    """Assembled sequence exceeds the backbone's max_positions."""


class PolicyError(RuntimeError):
    """A gradient step would touch a parameter group declared frozen."""


class ObjectiveBatchMismatchError(ValueError):
    """Batch contents do not match the training objective."""


class GroupTooSmallError(ValueError):
    """Curation group has fewer than two members."""


class UnparseableCaptionError(ValueError):
    """Caption does not belong to the shapes grammar."""


class TransientGenerationError(RuntimeError):
    """Retryable failure from an instruction-generator client."""


class ClientUnavailableError(RuntimeError):
    """Instruction-generator client failed after all retries."""


class EmptyResponseError(RuntimeError):
    """Instruction-generator client returned an empty instruction."""
