"""Exception taxonomy shared by all modules."""


class LagidError(Exception):
    """Base class for all package errors."""


class ContractError(LagidError, ValueError):
    """An argument violates a documented precondition (shape, range, count)."""


class ConfigError(LagidError, ValueError):
    """A configuration value is invalid or inconsistent."""


class CapabilityError(LagidError):
    """The requested quantity is not identified by this model family."""


class SingularMassError(LagidError):
    """Mass matrix is numerically singular (condition estimate above threshold)."""


class NumericError(LagidError):
    """A computation produced non-finite values."""


class IntegrationError(LagidError):
    """ODE integration failed; carries the time at which it failed."""

    def __init__(self, message: str, t_failed: float | None = None):
        super().__init__(message)
        self.t_failed = t_failed


class TrainingError(LagidError):
    """Training aborted; carries offending segment indices when known."""

    def __init__(self, message: str, segment_ids: tuple[int, ...] = ()):
        super().__init__(message)
        self.segment_ids = segment_ids


class CalibrationError(LagidError):
    """Energy-scale fit is degenerate or produced a non-positive scale."""


class DesignError(LagidError):
    """Controller synthesis failed (non-stabilizable pair, Riccati divergence)."""


class LinearizationError(LagidError):
    """Feedback linearization failed (singular effective inertia)."""
