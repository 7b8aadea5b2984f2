from typing import Optional


class SimulationError(Exception):
    """Base class for every error raised by the simulation services."""


class ZeroMassRegion(SimulationError):
    """Conditional sampling was requested on a jump region of probability zero."""


class DomainViolation(SimulationError):
    """A quantity was evaluated outside the domain where it is defined."""


class DegenerateDirection(SimulationError):
    """A target direction does not satisfy eta^T v < 0."""


class InconsistentTransition(SimulationError):
    """A transition that the importance kernel cannot produce was weighted."""


class AbortOverflow(SimulationError):
    """Too many paths hit the horizon cap before stopping."""


class InfeasibleOracle(SimulationError):
    """The crude oracle hit frequency is below the feasibility floor."""


class PreconditionViolation(SimulationError):
    """A state lies outside the region where a check is defined."""


class InsufficientSample(SimulationError):
    """Too few conditioned paths for a limit-law comparison."""


class SchemaError(SimulationError):
    """Malformed configuration: wrong type, unknown or duplicate key."""

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class ValidationError(SimulationError):
    """Well-formed configuration that violates a model invariant."""

    def __init__(self, message: str, invariant: Optional[str] = None):
        self.invariant = invariant
        if invariant:
            message = f"[{invariant}] {message}"
        super().__init__(message)
