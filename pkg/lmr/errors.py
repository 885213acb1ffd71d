"""
Exception hierarchy shared by every lmr module.
"""


class LMRError(Exception):
    """Base class for all errors raised by lmr"""

    pass


class FormatError(LMRError):
    """A file does not follow the expected on-disk format"""

    pass


class TruncationError(FormatError):
    """A binary file is shorter or longer than its header declares"""

    pass


class ValidationError(LMRError):
    """A value violates a domain invariant"""

    pass


class DuplicationError(ValidationError):
    """An id that must be unique appears twice"""

    pass


class CoverageError(ValidationError):
    """Records are missing for some required key"""

    pass


class ShapeError(LMRError):
    """Tensor or matrix shapes do not agree"""

    pass


class ConfigError(LMRError):
    """Configuration could not be parsed or failed validation"""

    pass


class TrainingError(LMRError):
    """Training produced a non-finite loss"""

    pass


class GradCheckFailure(LMRError):
    """Analytic and numerical gradients disagree"""

    def __init__(self, message: str, failures=None):
        super().__init__(message)
        self.failures = failures or []


class StateError(LMRError):
    """An operation was called on an object in the wrong state"""

    pass


class FeatureWriteError(LMRError):
    """Writing an artifact to disk failed"""

    def __init__(self, path, cause: Exception):
        super().__init__(f"Failed to write {path}: {cause}")
        self.path = path
