"""Exception hierarchy shared by all modules."""


class NanoarrayError(Exception):
    """Base class for every error raised by the package."""


class DomainError(NanoarrayError, ValueError):
    """An argument lies outside the domain of an operation."""


class NoTrapError(NanoarrayError):
    """No stable equilibrium exists (e.g. gravity beats the gradient force)."""


class StepSizeError(NanoarrayError, ValueError):
    """Integrator step violates the stability bound."""


class ZeroTorqueError(NanoarrayError):
    """A spin drive was requested for a geometry that cannot be driven."""


class UnboundedSpinError(NanoarrayError):
    """Terminal rotation diverges because there is no gas drag."""


class MissingChannelError(NanoarrayError, KeyError):
    pass


class NoPeakError(NanoarrayError):
    """No spectral peak stands above the noise floor."""


class InsufficientDataError(NanoarrayError):
    pass


class InfeasibleError(NanoarrayError):
    """Not enough particles to fill the requested target pattern."""

    def __init__(self, deficit: int, message: str | None = None):
        self.deficit = deficit
        super().__init__(message or f"target needs {deficit} more particle(s) than are loaded")


class PlanningError(NanoarrayError):
    pass


class StalePlanError(NanoarrayError):
    """Plan was computed against a different occupancy than the one supplied."""


class SelectionError(NanoarrayError):
    """Merge candidates do not satisfy the selection rule."""


class SingularityError(NanoarrayError, ZeroDivisionError):
    pass


class ConfigError(NanoarrayError):
    """Configuration or scenario file could not be parsed or validated."""


class ParticleLostError(NanoarrayError):
    """The particle left the escape radius of its trap."""
