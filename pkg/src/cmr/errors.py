"""Exception types shared across the package."""


class CmrError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionMismatchError(CmrError):
    """Operands disagree on band count, pixel count, or sample count."""


class SingularSystemError(CmrError):
    """A normal-equations system is singular or numerically near-singular."""


class ConvergenceError(CmrError):
    """An iterative routine exhausted its iteration budget.

    Carries the last residual seen, when one is available.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual
