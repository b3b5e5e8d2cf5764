"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument has the wrong shape, range or content."""


class ArchitectureError(InvalidInputError):
    """An architecture description cannot be turned into a network.

    ``block_index`` names the offending encoder block when known.
    """

    def __init__(self, message, block_index=None):
        if block_index is not None:
            message = f"block {block_index}: {message}"
        super().__init__(message)
        self.block_index = block_index


class ConfigError(InvalidInputError):
    """A config file is malformed. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class StateMismatchError(RuntimeError):
    """A checkpoint or stream state does not belong to the model at hand."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
