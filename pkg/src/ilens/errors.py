"""Exception types; each maps to a stable CLI exit code."""


class IlensError(Exception):
    exit_code = 1


class BadInputError(IlensError, ValueError):
    """Malformed or missing input files, configs, or arguments."""

    exit_code = 2


class NumericError(IlensError, ArithmeticError):
    """A numeric check failed or a computation produced non-finite values."""

    exit_code = 3


class DivergenceError(NumericError):
    """The revision optimizer produced a non-finite loss."""

    exit_code = 4


class EmptyStratumError(IlensError, ValueError):
    """A context-size stratum has no salient or no inessential coalitions."""

    exit_code = 5


class CapExceededError(IlensError, ValueError):
    """An exact computation was requested above its enumeration cap."""

    exit_code = 2
