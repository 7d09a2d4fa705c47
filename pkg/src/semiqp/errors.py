"""Exception and warning types shared across the package."""


class SemiqpError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(SemiqpError, ValueError):
    """Phase-space dimension of an argument does not match the model."""


class UnsupportedOrder(SemiqpError, ValueError):
    """Requested derivative or hierarchy order exceeds what is implemented."""


class CollisionError(SemiqpError, RuntimeError):
    """Two quasiparticle trajectories approached below the safe separation."""


class NonFinite(SemiqpError, FloatingPointError):
    """A state field left the finite floating-point range."""


class CausticSingular(SemiqpError, RuntimeError):
    """det M3 dropped below threshold: focal point, Green kernel invalid."""


class InterpolationOutOfRange(SemiqpError, ValueError):
    """Requested time lies outside the integrated series."""


class GridMismatch(SemiqpError, ValueError):
    """Two fields or series do not share the same grid."""


class QuadratureNotConverged(SemiqpError, RuntimeError):
    """Doubling the panel count changed the quadrature beyond tolerance."""


class BoundaryLeak(SemiqpError, RuntimeError):
    """Density at the box edge exceeded the leak threshold."""


class InsufficientOscillations(SemiqpError, RuntimeError):
    """Signal does not contain enough oscillations for a period estimate."""


class ConfigError(SemiqpError, ValueError):
    """Scenario configuration violates the documented schema."""


class TruncationWarning(UserWarning):
    """Tail mass outside the quadrature grid exceeded the threshold."""
