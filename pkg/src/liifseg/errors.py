"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """An argument value is outside its allowed domain."""


class ConfigError(ValueError):
    """A configuration object fails validation."""


class DataError(ValueError):
    """A dataset file or label map violates the documented layout."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, repeated backward, ...)."""


class CheckpointFormatError(RuntimeError):
    """Checkpoint magic/version does not match this library."""


class CheckpointCorruptionError(RuntimeError):
    """Checkpoint payload is truncated or inconsistent with its header."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss; carries the failing step."""

    def __init__(self, epoch, batch, detail):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}: {detail}"
        )
        self.epoch = epoch
        self.batch = batch
        self.detail = detail
