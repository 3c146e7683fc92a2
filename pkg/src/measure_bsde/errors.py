"""Exception hierarchy shared by all engines."""


class MeasureBsdeError(Exception):
    """Base class for every error raised by this package."""


class DomainError(MeasureBsdeError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ResourceError(MeasureBsdeError):
    """The requested object would exceed a memory or size cap."""


class NotRepresentableError(MeasureBsdeError):
    """A generator f cannot be written as f = z . g with a continuous g."""


class InvalidDensityError(MeasureBsdeError):
    """A candidate density has a nonpositive one-step multiplier."""


class ContractError(MeasureBsdeError):
    """An input violates a structural contract (e.g. is not a martingale)."""


class BasisError(MeasureBsdeError):
    """Regression design matrix is singular or the basis is too large."""


class ImportanceWeightError(MeasureBsdeError):
    """Importance weights degenerated (effective sample size too small)."""


class ConfigError(MeasureBsdeError):
    """A run configuration failed schema validation."""
