"""Exception and warning classes."""


class NMARError(Exception):
    """Base class for errors raised by this package."""


class NumericalError(NMARError, ValueError):
    """A quantity could not be evaluated (overflow, degenerate probability)."""


class ModelError(NMARError, ValueError):
    """A model specification cannot be used for the requested operation."""


class EstimationNA(NMARError):
    """Raised internally when an estimate is not applicable.

    Estimators catch it and return a non-converged result carrying
    ``reason``; it never escapes a Monte Carlo replicate.
    """

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class IllConditionedWarning(RuntimeWarning):
    """Jacobian condition number above the warning threshold."""


class BoundedBelowWarning(RuntimeWarning):
    """Response probabilities had to be clamped away from 0 or 1."""
