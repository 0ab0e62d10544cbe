"""Exception types raised by eqot."""


class EqotError(Exception):
    """Base class for all eqot errors."""


class DimensionError(EqotError, ValueError):
    """Array shapes are inconsistent or entries are not finite."""


class UncontrollableSystemError(EqotError):
    """The unit-horizon controllability Gramian is numerically singular."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class TrivialEquilibriumError(EqotError):
    """The drift matrix is nonsingular, so the equilibrium set is {0}."""


class OffEquilibriumError(EqotError, ValueError):
    """A point expected to lie on the equilibrium set does not."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotStrictlyConvexError(EqotError):
    """The reduced quadratic cost is not positive definite."""


class NotEndpointQuadraticError(EqotError):
    """Polarized quadratic forms do not reproduce the cost."""


class SteeringFailureError(EqotError):
    """The Hamiltonian boundary problem has no unique solution (conjugate time)."""


class ConvergenceError(EqotError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, residuals=None, iterations=None):
        super().__init__(message)
        self.residuals = residuals
        self.iterations = iterations


class EmptySupportError(EqotError, ValueError):
    """A measure's support does not intersect its domain box."""


class ConfigError(EqotError, ValueError):
    """A run configuration failed to parse; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
