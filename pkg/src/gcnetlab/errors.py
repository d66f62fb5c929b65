"""Exception types shared across the package."""


class GcnetLabError(Exception):
    """Base class for all package errors."""


class ConfigError(GcnetLabError):
    """Invalid scenario or pipeline configuration."""


class SingularityError(GcnetLabError):
    """State fell below the gravity singularity floor."""


class SingularArcError(GcnetLabError):
    """Velocity costate vanished; the optimal direction is undefined."""


class SolverFailure(GcnetLabError):
    """Iterative solver did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class LambertError(SolverFailure):
    """Lambert iteration failed to converge."""


class DegenerateGeometryError(GcnetLabError):
    """Transfer endpoints do not define a plane (near-180 degree geometry)."""


class LossError(GcnetLabError):
    """Loss evaluated on degenerate inputs (e.g. zero-norm direction)."""


class UsageError(GcnetLabError):
    """Bad command-line usage."""
