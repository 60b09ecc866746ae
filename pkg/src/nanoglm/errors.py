"""Exception types shared across the package."""


class NanoglmError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(NanoglmError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(NanoglmError, ValueError):
    """Adapter rank exceeds the dimensions of the targeted projection."""


class SequenceLengthError(NanoglmError, ValueError):
    """A token sequence would exceed the model's maximum length."""


class ConfigurationError(NanoglmError, ValueError):
    """Invalid configuration value; carries the offending field name."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ModelFileError(NanoglmError):
    """Base class for weight/adapter/quantized file problems."""


class BadMagicError(ModelFileError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(ModelFileError):
    """File carries an unsupported format version."""


class ShapeMismatchError(ModelFileError):
    """A stored tensor's shape disagrees with the embedded config."""


class CorruptFileError(ModelFileError):
    """File is truncated or otherwise structurally invalid."""


class NotFoundError(NanoglmError, KeyError):
    """A requested document or session does not exist."""


class DegenerateExampleError(NanoglmError, ValueError):
    """A training example is unusable (e.g. empty answer)."""


class TranslationError(NanoglmError):
    """Base class for translation-pipeline failures."""


class TransientTransportError(TranslationError):
    """Retryable transport failure (timeout, connection reset, 5xx)."""


class AuthError(TranslationError):
    """Authentication rejected by the translation endpoint; not retryable."""
