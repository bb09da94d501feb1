"""Exception and warning types shared across the package."""


class RenvError(Exception):
    """Base class for all library errors."""


class OutOfWindow(RenvError):
    """A query left the represented window of an environment path."""

    def __init__(self, x, half_width):
        super().__init__(f"abscissa {x!r} outside window [-{half_width}, {half_width}]")
        self.x = x
        self.half_width = half_width


class DegenerateEnvironment(RenvError):
    """The Hölder seminorm vanishes so no affine approximation exists."""


class NonConfining(RenvError):
    """The quadratic coefficient is not positive, so the pseudo-scale has no inverse."""


class BracketExhausted(RenvError):
    """The tabulated pseudo-scale could not bracket the requested value."""


class BadTimeOrigin(RenvError):
    """A Brox-time sample precedes time 1."""


class EscapeCapExceeded(RenvError):
    """Too many replicas left the represented environment."""


class NonPositiveDistance(RenvError):
    """A rate fit received a non-positive distance."""


class QuadratureNotConverged(RenvError):
    """A quadrature failed to reach its tolerance."""


class ViolationUnbounded(RenvError):
    """A drift inequality residual keeps growing at the grid boundary."""


class NotACouplingSet(RenvError):
    """Rows indexed by the candidate set share no common mass."""


class NegativeResidual(RenvError):
    """The minorized residual kernel has a negative entry."""


class ConfigError(RenvError):
    """An experiment configuration is invalid."""


class TailDominated(UserWarning):
    """A weighted average is driven by a handful of extreme samples."""
