"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An argument or tensor violates a documented precondition."""


class IngestionError(RuntimeError):
    """A dataset file is missing, unreadable, or undecodable."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be written or read."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite; carries the offending step's diagnostics."""
