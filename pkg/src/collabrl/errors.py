"""Exception hierarchy shared by all modules."""


class CollabRLError(Exception):
    """Base class for every error raised by this package."""


class InstanceError(CollabRLError, ValueError):
    """Inconsistent or invalid problem data (shapes, probabilities, ranges)."""


class GenerationError(CollabRLError):
    """Instance synthesis could not satisfy the requested constraints."""


class DegenerateInputError(CollabRLError, ValueError):
    pass


class ContractViolation(CollabRLError, ValueError):
    """An input broke a documented precondition (e.g. reward outside [0, 1])."""


class NonTerminationError(CollabRLError):
    """An adaptive loop hit its safety cap.

    ``diagnostics`` carries whatever the loop knew when it gave up.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RecoveryError(CollabRLError):
    """Matrix completion did not certify recovery for some horizon."""

    def __init__(self, message: str, failures: dict | None = None):
        super().__init__(message)
        self.failures = failures or {}


class SolverError(CollabRLError):
    pass


class FitFailure(CollabRLError):
    """Rank-constrained fit could not drive the measurement loss to zero."""

    def __init__(self, message: str, loss: float, best=None):
        super().__init__(message)
        self.loss = loss
        self.best = best  # lowest-loss fit found, if any


class DeficiencyError(CollabRLError):
    """Grammian stayed below the target isometry in some direction."""

    def __init__(self, message: str, h: int, direction, eigenvalue: float):
        super().__init__(message)
        self.h = h
        self.direction = direction
        self.eigenvalue = eigenvalue


class InfeasibleSearchError(CollabRLError):
    pass


class PhaseFailure(CollabRLError):
    """A pipeline phase failed; ``partial`` holds the report built so far."""

    def __init__(self, phase: str, cause: Exception, partial=None):
        super().__init__(f"{phase} failed: {cause}")
        self.phase = phase
        self.cause = cause
        self.partial = partial
