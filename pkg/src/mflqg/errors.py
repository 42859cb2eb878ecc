"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems give 1, solver
breakdowns give 2, and I/O problems give 3.
"""


class MflqgError(Exception):
    """Base class for all package errors."""


class ValidationError(MflqgError):
    """Inputs violate a structural or sign requirement."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent."""


class ShapeError(ValidationError):
    """A matrix lacks a required structural property such as symmetry."""


class CapacityError(ValidationError):
    """A problem exceeds a configured size cap."""


class SolverBreakdown(MflqgError):
    """A numerical solver could not continue.

    ``node`` is the grid index (or tree depth) where the failure occurred,
    when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class BlowUpError(SolverBreakdown):
    """A non-finite value appeared during integration or simulation."""


class NonInvertibleError(SolverBreakdown):
    """A matrix that must be inverted is singular."""


class DivergenceError(SolverBreakdown):
    """A fixed-point iteration stopped contracting."""


class UnboundedError(SolverBreakdown):
    """A tree-node quadratic lost the definiteness its optimization needs."""


class ScenarioIOError(MflqgError):
    """A scenario or result file could not be read or written."""
