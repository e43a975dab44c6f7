"""Exception hierarchy shared by every fvlab module."""


class FvLabError(Exception):
    """Base class for all fvlab errors."""


class DomainError(FvLabError, ValueError):
    """A parameter lies outside the domain where a formula is defined."""


class TimeOrder(FvLabError, ValueError):
    """A query time precedes the particle's last event time."""


class GridMismatch(FvLabError, ValueError):
    """A diffusion was queried away from its Euler grid."""


class IntensityBoundViolated(FvLabError):
    """killing_intensity(x) exceeded the declared lambda_sup."""


class ThinningBoundViolated(FvLabError):
    """A PDMP jump rate exceeded the declared thinning bound."""


class HardKillingUnsupported(FvLabError):
    """Models with boundary (predictable) killing have no intensity."""


class ModeUnsupported(FvLabError):
    """The requested engine mode cannot run this model's dynamics."""


class TotalExtinction(FvLabError):
    """All particles were killed in a single discretized step."""


class FailedRun(FvLabError):
    """An estimator was requested from a failed run."""


class OracleMissing(FvLabError):
    """An analytic quantity was requested from a model without an oracle."""


class QuadratureNotConverged(FvLabError):
    """Simpson refinement did not reach the requested tolerance."""


class NotStrictlyDecreasing(FvLabError):
    """Survival curve is flat where a survival-spaced mesh needs a root."""


class InsufficientReplications(FvLabError):
    """Too few replications for a variance confidence interval."""


class ConfigError(FvLabError):
    """Experiment configuration failed schema validation."""


class CheckFailed(FvLabError):
    """At least one enabled verification check did not pass."""
