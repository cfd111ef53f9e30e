"""Exception types raised across the toolkit."""


class CardioSynthError(Exception):
    """Base class for all toolkit errors."""


class MissingFileError(CardioSynthError):
    """A required volume, checkpoint, or manifest file does not exist."""


class CorruptHeaderError(CardioSynthError):
    """A volume file exists but its header cannot be parsed."""


class ShapeMismatchError(CardioSynthError):
    """Image and label volumes (or paired arrays) disagree in shape."""


class LabelDomainError(CardioSynthError):
    """A label array contains values outside {0, 1, 2, 3}."""


class GeometryError(CardioSynthError):
    """Spatial preconditions violated (spacing, size, impossible anatomy)."""


class NormalizationError(CardioSynthError):
    """Degenerate intensity distribution (percentiles coincide)."""


class EmptyCohortError(CardioSynthError):
    """A statistic was requested over an empty collection of subjects."""


class NotPositiveDefiniteError(CardioSynthError):
    """A matrix stayed non-positive-definite after maximum jitter."""


class TrainingError(CardioSynthError):
    """Training aborted (NaN loss, empty dataset)."""


class ConfigError(CardioSynthError):
    """Invalid pipeline configuration."""


class StageError(CardioSynthError):
    """A CLI pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
