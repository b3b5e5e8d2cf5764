"""Ultra-lightweight causal speech enhancement with a searchable block zoo."""

from .complexity import count_macs, count_params, report
from .errors import ArchitectureError, ConfigError, InvalidInputError, StateMismatchError, TrainingDivergedError
from .network import (ArchitectureSpec, Model, assemble, enhance, load_checkpoint, save_checkpoint,
                      stream_enhance)

__version__ = "0.1.0"

__all__ = [
    "count_macs", "count_params", "report", "ArchitectureError", "ConfigError", "InvalidInputError",
    "StateMismatchError", "TrainingDivergedError", "ArchitectureSpec", "Model", "assemble", "enhance",
    "load_checkpoint", "save_checkpoint", "stream_enhance",
]
