"""
Error hierarchy shared by every module.

Each class carries the process exit code the CLI returns for it.
"""

from typing import Optional


class NeuroclipError(Exception):
    """Base class for all errors raised on purpose by this project."""

    exit_code = 1


class ConfigError(NeuroclipError, ValueError):
    """
    Invalid configuration value.

    Attributes:
        field: name of the offending configuration field (if known)
    """

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class ParameterError(ConfigError):
    """Operation parameter outside its valid range (cutoffs, ratios, window sizes)."""


class DataError(NeuroclipError):
    """Input data is unusable for the requested operation."""

    exit_code = 3


class CorruptDatasetError(DataError):
    """Dataset directory is inconsistent (checksum, size or manifest mismatch)."""


class ImputationError(DataError):
    """An ROI has no good channel left to impute from."""


class DataRangeError(DataError, IndexError):
    """A window or event lies outside the signal."""


class LengthError(DataError):
    """Signal too short for the operation."""


class DomainError(DataError):
    """Value outside the mathematical domain of the operation."""


class PlanError(DataError):
    """Cross-validation plan is inconsistent with the data or leaks subjects."""


class DegenerateDataError(DataError):
    """Data carries no information for the statistic (e.g. all differences zero)."""


class TrainingDivergence(NeuroclipError):
    """
    Loss or gradient became non-finite during training.

    Attributes:
        step: optimizer step index at which divergence was detected
    """

    exit_code = 4

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} (step {step})")


class ShapeError(NeuroclipError, ValueError):
    """Incompatible array shapes."""


class ContractError(NeuroclipError, RuntimeError):
    """A documented precondition of an operation was violated."""


class UnknownHeadError(NeuroclipError, KeyError):
    """Decoder head id is not registered on the model."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UnknownTaskError(NeuroclipError, KeyError):
    """Task id is not registered."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""
