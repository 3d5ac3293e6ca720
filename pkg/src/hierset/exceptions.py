"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition or invariant."""


class InfeasibleError(RuntimeError):
    """Raised when the constraint system admits no feasible assignment.

    Carries the pair constraints that were active so callers can report
    which requirements could not be met.
    """

    def __init__(self, message, pair_constraints=()):
        super().__init__(message)
        self.pair_constraints = tuple(pair_constraints)


class IterationCapError(RuntimeError):
    """Raised when an iterative scheme exceeds its iteration cap."""
