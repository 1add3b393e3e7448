"""Exception types shared across the package."""


class CountVbError(Exception):
    """Base class for all countvb errors."""


class ParameterError(CountVbError, ValueError):
    """A distribution or model parameter is outside its valid range."""


class SupportError(CountVbError, ValueError):
    """An evaluation point lies outside the support of a distribution."""


class DesignError(CountVbError, ValueError):
    """A design matrix or model specification is malformed."""


class NumericalError(CountVbError, ArithmeticError):
    """A numerical failure (non-finite bound, non-SPD matrix) during fitting.

    Carries the iteration index and a compact state summary for diagnosis.
    """

    def __init__(self, message, iteration=None, state_dump=None):
        super().__init__(message)
        self.iteration = iteration
        self.state_dump = state_dump


class ConvergenceError(CountVbError, RuntimeError):
    """A fit that is required to converge did not."""
