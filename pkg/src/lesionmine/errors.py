"""Exception hierarchy shared across the toolkit.

The CLI maps each family onto a distinct exit code.
"""


class LesionMineError(Exception):
    exit_code = 1


class ConfigError(LesionMineError, ValueError):
    exit_code = 2


class DataError(LesionMineError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """A malformed input row; ``row`` is 1-based and counts the header as row 1."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class BackendError(LesionMineError, RuntimeError):
    exit_code = 4


class BackendExitError(BackendError):
    pass


class ProtocolError(BackendError):
    def __init__(self, message: str, line_number: int | None = None, line: str | None = None):
        self.line_number = line_number
        self.line = line
        if line_number is not None:
            message = f"line {line_number}: {message}"
        if line is not None:
            message = f"{message} (offending line: {line[:200]!r})"
        super().__init__(message)


class BackendTimeout(BackendError, TimeoutError):
    pass
