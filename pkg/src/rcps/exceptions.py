"""Exception hierarchy shared across the package."""


class RcpsError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RcpsError, ValueError):
    """Array shapes are inconsistent with each other or with a contract."""


class ArgumentError(RcpsError, ValueError):
    """An argument is out of its documented range (negative scale, empty set, ...)."""


class DomainError(RcpsError, ValueError):
    """A numeric input lies outside the mathematical domain of an operation."""


class ConfigError(RcpsError, ValueError):
    """A configuration is internally inconsistent or incomplete."""


class TrainingError(RcpsError, RuntimeError):
    """Training failed, e.g. the loss became non-finite."""


class FormatError(RcpsError, ValueError):
    """A file does not conform to its expected on-disk format.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InfeasibleError(RcpsError, RuntimeError):
    """No scale value on the grid satisfies the risk bound.

    Carries enough context for callers to report what would need to change:
    ``min_ucb`` is the smallest achievable upper confidence bound, ``needed_n``
    the calibration size that would make the current risk curve feasible (None
    when no n can help), and ``needed_alpha`` the smallest feasible risk level
    at the current n.
    """

    def __init__(self, message, min_ucb=None, needed_n=None, needed_alpha=None):
        super().__init__(message)
        self.min_ucb = min_ucb
        self.needed_n = needed_n
        self.needed_alpha = needed_alpha
