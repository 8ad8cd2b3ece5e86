"""Exception types raised across the package."""


class InvalidInput(ValueError):
    """Malformed or out-of-range input."""


class NumericalFailure(ArithmeticError):
    """A linear-algebra routine could not proceed (singular or non-SPD input)."""


class NonConvergence(RuntimeError):
    """An iterative solver hit its iteration cap.

    The best iterate found so far is attached as ``best`` so callers may
    decide whether to use it.
    """

    def __init__(self, message, best=None, n_iter=None):
        super().__init__(message)
        self.best = best
        self.n_iter = n_iter
