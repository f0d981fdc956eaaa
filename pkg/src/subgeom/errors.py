"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the function it was passed to."""


class ConfigError(ValueError):
    """A scenario, rate or model description is malformed."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


class SingularityError(RuntimeError):
    """A linear solve degenerated (e.g. reducible chain)."""


class UniformizationOverflow(RuntimeError):
    """Uniformization rate times horizon exceeds the configured cap."""


class AutoTargetError(RuntimeError):
    """Automatic extraction of the target set left the allowed compact region."""


class TailBoundError(RuntimeError):
    """The analytic tail bound of a truncated integral exceeds tolerance."""


class UnreliableEstimate(RuntimeError):
    """Too many censored paths for an estimate to be trusted."""
