"""Exception hierarchy shared across the package."""


class CrispError(Exception):
    pass


class ShapeError(CrispError, ValueError):
    pass


class ConfigError(CrispError, ValueError):
    pass


class NumericalError(CrispError, ArithmeticError):
    """Raised when an iterative routine produces NaN, diverges or fails to converge."""

    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class DivergenceError(NumericalError):
    pass


class GateRangeWarning(UserWarning):
    """A gate inversion target fell outside the activation's range and was clamped."""


class ContainerError(CrispError, ValueError):
    """Base class for unreadable tensor containers."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass
