"""Exception types shared across the toolkit."""


class ChestSepError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(ChestSepError, ValueError):
    """Operands have inconsistent shapes; the message names the offending dims."""


class NonFiniteError(ChestSepError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class DegenerateInput(ChestSepError, ValueError):
    """Input is degenerate for the requested operation (e.g. all-zero signal)."""


class UndefinedMetric(ChestSepError, ValueError):
    """Metric is undefined for these inputs (e.g. all-zero reference)."""


class DegenerateReferences(ChestSepError, ValueError):
    """Reference signals are rank deficient; projections are not unique."""


class CheckpointFormatError(ChestSepError, ValueError):
    """Checkpoint file has the wrong magic or an unsupported version."""


class CheckpointCorruptError(ChestSepError, ValueError):
    """Checkpoint file is truncated or fails its integrity check."""


class WavFormatError(ChestSepError, ValueError):
    """WAV file is malformed or uses an unsupported encoding."""


class ConfigError(ChestSepError, ValueError):
    """Bad configuration value, unknown key, or unsupported override."""


class TrainingDiverged(ChestSepError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
