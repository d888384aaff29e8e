"""Exception types shared across the package."""


class FaasmlError(Exception):
    """Base class for all library errors."""


class ConfigError(FaasmlError):
    """Invalid or inconsistent job/model configuration."""


class DatasetParseError(FaasmlError):
    """Malformed dataset file; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BlobTooLarge(FaasmlError):
    """Payload exceeds the channel's maximum item size."""


class WireFormatError(FaasmlError):
    """Malformed binary blob, frame, or checkpoint."""


class KeyGrammarError(FaasmlError):
    """Storage key does not match the collective key grammar."""


class StragglerTimeout(FaasmlError):
    """A collective round timed out waiting for peers."""

    def __init__(self, message: str, missing_ranks=()):
        super().__init__(message)
        self.missing_ranks = tuple(missing_ranks)


class DivergenceError(FaasmlError):
    """Training produced a non-finite loss or iterate."""


class CheckpointError(FaasmlError):
    """Checkpoint blob is corrupt or cannot be restored."""


class LifetimeExceeded(FaasmlError):
    """A single iteration is longer than the worker lifetime allows."""


class PSProtocolError(FaasmlError):
    """Parameter-server channel error (connection or ERR frame)."""


class EstimateFailed(FaasmlError):
    """Epoch estimator could not reach the loss threshold; carries best loss."""

    def __init__(self, message: str, best_loss: float):
        super().__init__(message)
        self.best_loss = best_loss


class JobAborted(FaasmlError):
    """Worker was cancelled because a peer failed."""
