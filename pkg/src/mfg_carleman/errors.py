"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MfgCarlemanError(Exception):
    """Base class for all package errors."""


class GeometryError(MfgCarlemanError, ValueError):
    """Unsupported domain / subboundary configuration or invalid geometry inputs."""


class ConstraintError(MfgCarlemanError, ValueError):
    """A scalar-parameter constraint (admissible ratio, window exponent interval,
    weight-extreme ordering) is violated."""


class GridError(MfgCarlemanError, ValueError):
    """Degenerate or inconsistent space-time grid."""


class TraceError(MfgCarlemanError, ValueError):
    """Missing boundary/time-slice traces, or a trace precondition is violated."""


class SolverError(MfgCarlemanError, RuntimeError):
    """Time-stepping failure: non-convergent inner iteration or singular system."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class OverflowGuardError(MfgCarlemanError, ValueError):
    """Requested large parameter s exceeds the overflow guard for this grid."""

    def __init__(self, message: str, s_max: float):
        super().__init__(message)
        self.s_max = s_max


class ConvergenceError(MfgCarlemanError, RuntimeError):
    """Iterative least-squares solve did not converge."""

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history or []


class ConfigError(MfgCarlemanError, ValueError):
    """Invalid or inconsistent experiment configuration."""
