"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3 and numerical failures with 4.
"""


class OsrkError(Exception):
    exit_code = 1


class ConfigError(OsrkError, ValueError):
    exit_code = 2


class ShapeError(OsrkError, ValueError):
    exit_code = 2


class ArgumentError(OsrkError, ValueError):
    exit_code = 2


class DataError(OsrkError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(ParseError):
    pass


class MissingKeyError(ParseError):
    pass


class VersionError(DataError):
    pass


class ChecksumError(DataError):
    pass


class NumericalError(OsrkError, ArithmeticError):
    exit_code = 4
