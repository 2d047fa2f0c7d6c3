"""Exception types shared across the package."""


class GridMismatchError(ValueError):
    """Two fields were combined but live on different chart grids."""


class NonFiniteFieldError(ValueError):
    """A derivative or field produced a NaN/inf; the message names the node."""


class DegenerateFiberError(ValueError):
    """|V|^2 vanished away from a flagged fixed-point endpoint."""


class AdmissibilityError(ValueError):
    """A candidate potential left the positive cone (omega_u > 0 failed)."""


class ConstraintViolationError(ValueError):
    """A pointwise inequality required by a construction failed; names the worst node."""


class NoSolutionError(ValueError):
    """The reduced closed-form equation has no solution (sign obstruction)."""


class CriticalValueError(ValueError):
    """A moment interval touched the critical value of the moment map."""


class StabilityError(ValueError):
    """Requested time step exceeds the explicit stepper's stability bound."""


class NewtonNonconvergence(RuntimeError):
    """Newton failed to converge; carries the full iteration report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class ContinuationStall(RuntimeError):
    """Path continuation could not advance; carries the reached parameter."""

    def __init__(self, message, s_reached, report=None):
        super().__init__(message)
        self.s_reached = s_reached
        self.report = report
