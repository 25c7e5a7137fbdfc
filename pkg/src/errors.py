"""Error types raised across the metagen package."""

from typing import List, Sequence


class MetagenError(Exception):
    """Base class for every error raised by this package."""


class InvalidDistribution(MetagenError, ValueError):
    pass


class AbsoluteContinuityViolation(MetagenError, ValueError):
    pass


class SingularCovariance(MetagenError, ValueError):
    pass


class InsufficientSamples(MetagenError, ValueError):
    pass


class DimensionMismatch(MetagenError, ValueError):
    pass


class EnumerationTooLarge(MetagenError, ValueError):
    pass


class AllDrawsDegenerate(MetagenError, RuntimeError):
    pass


class BatchLargerThanTaskSet(MetagenError, ValueError):
    pass


class InsufficientResamples(MetagenError, ValueError):
    pass


class CoverageViolation(MetagenError, ValueError):
    pass


class OutputUnwritable(MetagenError, OSError):
    pass


class EnvironmentFileMissing(MetagenError, FileNotFoundError):
    pass


class ConfigInvalid(MetagenError, ValueError):
    """Raised once per config with every field-level problem attached."""

    def __init__(self, problems: Sequence[str]):
        self.problems: List[str] = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))
