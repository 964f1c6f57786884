"""Error types shared across the package."""


class ShapeError(ValueError):
    """Tensor rank or dimension does not match what the operation expects."""


class ConfigError(ValueError):
    """Configuration value is missing, unknown, or inconsistent."""


class CheckpointError(RuntimeError):
    """Checkpoint is missing, malformed, or does not match the config."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; the run was aborted."""
