"""
Exception hierarchy shared by the simulation, inference and pipeline packages.

Every exception carries the CLI exit code it maps to, so app.py can translate
failures without knowing where they were raised.
"""

from typing import Optional, Sequence


class BalError(Exception):
    """Base class for all errors raised by this package"""

    exit_code = 3


class ConfigError(BalError, ValueError):
    """Invalid or unreadable experiment configuration"""

    exit_code = 1


class MissingPrerequisiteError(BalError):
    """A pipeline stage was invoked before the stage it depends on"""

    exit_code = 2


class DimensionMismatchError(BalError, ValueError):
    """Array shapes do not agree"""


class NumericalInstabilityError(BalError):
    """Non-finite state in the forward model"""

    def __init__(self, message: str, step: Optional[int] = None, z: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.step = step
        self.z = None if z is None else [float(v) for v in z]


class RegionGrowthError(BalError):
    """Region growing got trapped before reaching its target size"""


class ModelCorruptError(BalError):
    """VAE parameters produced non-finite outputs"""


class VaeTrainingError(BalError):
    """VAE training diverged"""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class IllConditionedError(BalError):
    """Kernel matrix could not be factorized even after maximum jitter"""


class DegenerateDensityError(BalError):
    """A density grid has no mass to normalize"""


class UndefinedCorrelationError(BalError, ValueError):
    """Correlation requested for a constant field"""


class TooManyExclusionsError(BalError):
    """Too many samples had non-finite log densities in a KL estimate"""


class HyperparamSearchWarning(UserWarning):
    """Every restart of the GP hyperparameter search failed"""


class BandwidthFloorWarning(UserWarning):
    """A KDE bandwidth was floored because the samples have no spread"""
