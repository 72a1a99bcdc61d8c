"""Exception hierarchy shared by the library and the command line."""


class CLSNAError(Exception):
    """Base class for all errors raised by :mod:`clsna`."""

    exit_code = 1


class InputError(CLSNAError, ValueError):
    """Malformed data, configuration or arguments."""

    exit_code = 2


class NumericError(CLSNAError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""

    exit_code = 3


class DegeneracyError(NumericError):
    """Anchored optimum is not below the mode, so no curvature can be read off."""


class ConvergenceError(CLSNAError, RuntimeError):
    """An optimizer failed to reach its stopping criterion."""

    exit_code = 4
