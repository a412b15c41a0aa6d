"""Self-supervised image captioning with a rotation pretext task."""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, DataError, RotcapError, TrainingDivergence

__all__ = ["CheckpointError", "ConfigError", "DataError", "RotcapError",
           "TrainingDivergence", "__version__"]
