"""Exception types shared across the toolkit.

Exit-code mapping lives in the CLI: DataError/ConfigError/CheckpointError
are input problems (exit 1), TrainingDivergence is a numerical failure
(exit 2).
"""


class RotcapError(Exception):
    """Base class for all toolkit errors."""


class DataError(RotcapError):
    """Bad dataset, manifest, image file, or caption input."""


class ConfigError(RotcapError):
    """Invalid or unparseable configuration."""


class CheckpointError(RotcapError):
    """Corrupt checkpoint file or topology mismatch on load."""


class TrainingDivergence(RotcapError):
    """Non-finite loss encountered during training."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
