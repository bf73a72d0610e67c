"""Exception types shared across the package."""


class UampmfError(Exception):
    """Base class for package errors."""


class NumericalDecompositionError(UampmfError):
    """A matrix decomposition (SVD/EVD) failed or its input was invalid."""


class DegenerateModelError(UampmfError):
    """The pseudo observation model is degenerate (e.g. all-zero whitening source)."""


class DegenerateVarianceError(UampmfError):
    """A variance combination is degenerate (e.g. prior and observation both exact)."""


class DivergenceError(UampmfError):
    """An iterative solver produced non-finite values.

    Carries the last finite state in ``last_state`` so callers can inspect or
    fall back to it.
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class ConfigurationError(UampmfError):
    """Invalid user-supplied configuration."""
