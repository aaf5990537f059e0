"""Exception hierarchy shared by the library and the command-line tool."""


class SvdClipError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this error."""

    exit_code = 1


class ShapeError(SvdClipError, ValueError):
    exit_code = 10


class ConfigError(SvdClipError, ValueError):
    exit_code = 3


class InputError(SvdClipError, ValueError):
    exit_code = 11


class UsageError(SvdClipError, RuntimeError):
    exit_code = 12


class DegenerateError(SvdClipError, ValueError):
    exit_code = 13


class NumericError(SvdClipError, ArithmeticError):
    """Raised when an iterative routine fails to converge."""

    exit_code = 7

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class FormatError(SvdClipError, ValueError):
    exit_code = 6


class ChecksumError(FormatError):
    exit_code = 5


class MissingFileError(SvdClipError, FileNotFoundError):
    exit_code = 4
