class DermxError(Exception):
    """Base class for errors raised by dermxkit."""

    category = "error"


class SchemaError(DermxError):
    """Annotation index or bundle does not match the expected layout."""

    category = "schema"


class ConfigError(DermxError):
    """Unknown or invalid configuration key/value."""

    category = "config"


class ShapeError(DermxError, ValueError):
    category = "shape"


class GradCamError(DermxError, RuntimeError):
    category = "gradcam"


class TrainingError(DermxError, RuntimeError):
    """Raised when optimisation produces a non-finite loss."""

    category = "training"

    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
