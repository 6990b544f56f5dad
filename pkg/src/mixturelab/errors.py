"""Exception types shared across mixturelab."""


class MixtureLabError(Exception):
    """Base class for all mixturelab errors."""


class DimensionError(MixtureLabError, ValueError):
    """Raised when array shapes or index sets do not match the model."""


class SingularMatrixError(MixtureLabError, ArithmeticError):
    """Raised when a matrix that must be positive definite is not.

    The ``matrix`` attribute names the offending matrix.
    """

    def __init__(self, message, matrix=None):
        super().__init__(message)
        self.matrix = matrix


class DegenerateComponentError(MixtureLabError, ArithmeticError):
    """A mixture component lost (almost) all of its responsibility mass."""

    def __init__(self, message, component=None, iteration=None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration


class FittingFailedError(MixtureLabError, RuntimeError):
    """Every start of a multi-start fit failed.

    ``reasons`` holds one message per start.
    """

    def __init__(self, message, reasons=()):
        super().__init__(message)
        self.reasons = list(reasons)


class QuadratureError(MixtureLabError, ArithmeticError):
    """Adaptive quadrature did not reach the requested tolerance."""


class MonotonicityViolationError(MixtureLabError, ValueError):
    """Moment estimates imply a non-positive share of compliers."""
