"""Exception types raised across the package."""


class MfgcError(Exception):
    """Base class for all package errors."""


class InnerMaxDiverged(MfgcError):
    """Inner Newton maximization of the Hamiltonian failed to converge."""


class SizeMismatch(MfgcError, ValueError):
    """Clouds of unequal size passed to an exact assignment solver."""


class NoConvergence(MfgcError):
    """A fixed-point iteration hit its iteration cap.

    Attributes
    ----------
    residual : float
        The last residual reached before giving up.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class SingularM(MfgcError):
    """The block matrix of the implicit system could not be factorized."""

    def __init__(self, message, min_eigenvalue=float("nan")):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class MissingConstants(MfgcError):
    """A model does not declare the monotonicity constants needed."""


class StabilityViolation(MfgcError):
    """Explicit time stepping blew up (CFL or truncation failure)."""


class FixedPointFailure(MfgcError):
    """The per-node action fixed point failed inside a grid solve."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class NonLqModel(MfgcError, TypeError):
    """A closed-form routine received a model outside the LQ family."""


class WrongCloudSize(MfgcError, ValueError):
    """A lift evaluator received a cloud with the wrong number of atoms."""


class OutOfDomain(MfgcError, ValueError):
    """A point lies outside the computational grid."""


class PicardStalled(MfgcError):
    """The mean-field Picard loop did not converge."""


class ConfigError(MfgcError):
    """Invalid experiment configuration."""


class UnknownKind(MfgcError, ValueError):
    """Unknown plot kind requested."""
