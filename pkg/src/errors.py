"""
Error types for the continual pose lab
Every error carries the CLI exit code it maps to
"""

from typing import Optional


class ContinualPoseError(Exception):
    """Base class for everything this package raises on purpose"""

    exit_code = 2


# Config / usage (exit 1)

class ConfigError(ContinualPoseError):
    exit_code = 1


class UsageError(ContinualPoseError):
    exit_code = 1


class SpecError(ContinualPoseError):
    """A model or scenario description that cannot be built"""

    exit_code = 1


class ScenarioError(SpecError):
    pass


# Runtime aborts (exit 2)

class DimensionError(ContinualPoseError):
    pass


class RankError(ContinualPoseError):
    pass


class TemperatureError(ContinualPoseError):
    pass


class NormalizationError(ContinualPoseError):
    pass


class NonFiniteGradientError(ContinualPoseError):
    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.layer = layer


class ExpansionError(ContinualPoseError):
    pass


class LayerLookupError(ContinualPoseError, LookupError):
    pass


class RegistryError(ContinualPoseError):
    pass


class ChannelError(ContinualPoseError):
    pass


class SchemaError(ContinualPoseError):
    pass


class DataError(ContinualPoseError):
    pass


class ExperienceIndexError(ContinualPoseError, IndexError):
    """A dataset index the scenario never trained on"""


class TrainingAbort(ContinualPoseError):
    """Non-finite loss during training"""

    def __init__(self, message: str, experience: int, epoch: int, batch: int):
        super().__init__(message)
        self.experience = experience
        self.epoch = epoch
        self.batch = batch

    def diagnostics(self) -> dict:
        return {
            "error": type(self).__name__,
            "message": str(self),
            "experience": self.experience,
            "epoch": self.epoch,
            "batch": self.batch,
        }


# I/O (exit 3)

class ParseError(ContinualPoseError):
    exit_code = 3

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FormatError(ContinualPoseError):
    exit_code = 3

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class OutputExistsError(ContinualPoseError):
    exit_code = 3
