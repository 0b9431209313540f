"""Exception hierarchy shared by all morphflow modules."""


class MorphflowError(Exception):
    """Base class for every error raised by this package."""

    #: process exit code used by the command line interface
    exit_code = 2


class ParseError(MorphflowError):
    """A file could not be parsed.

    Parameters
    ----------
    message : str
        What went wrong.
    line : int, optional
        1-based line number of the offending record.
    path : str, optional
        File being read.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}:"
        super().__init__(f"{where} {message}" if where else message)


class UnsupportedFormat(MorphflowError):
    pass


class DegenerateCovariance(MorphflowError):
    pass


class DegenerateNeighborhood(MorphflowError):
    pass


class RowCountMismatch(MorphflowError):
    pass


class FieldMismatch(MorphflowError):
    pass


class OutOfHorizon(MorphflowError):
    pass


class Disconnected(MorphflowError):
    pass


class NonFiniteState(MorphflowError):
    """Integration produced a NaN or infinite coordinate."""

    exit_code = 3

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"EM iteration {iteration}: {message}"
        super().__init__(message)


class SingularSystem(MorphflowError):
    """The damped Gauss-Newton system could not be solved."""

    exit_code = 3

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"EM iteration {iteration}: {message}"
        super().__init__(message)


class ConfigError(MorphflowError):
    """Invalid configuration key, value or command line combination."""
