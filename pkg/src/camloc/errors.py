"""Exception types shared across the toolkit."""


class CamlocError(Exception):
    """Base class for every error raised by camloc."""


class DimensionError(CamlocError, ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class UsageError(CamlocError, ValueError):
    """An operation was called in a way its contract forbids."""


class NumericError(CamlocError, ArithmeticError):
    """A computation left the finite or numerically stable domain."""


class ParseError(CamlocError, ValueError):
    """A text input could not be parsed.

    Carries the location of the first offending token so callers can
    report `path:line:column`.
    """

    def __init__(self, message: str, path: str | None = None,
                 line: int | None = None, column: int | None = None):
        loc = ":".join(str(p) for p in (path, line, column) if p is not None)
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line
        self.column = column


class DataError(CamlocError, ValueError):
    """Dataset contents violate an invariant (missing file, bad pose, ...)."""


class ConfigError(CamlocError, ValueError):
    """A run configuration is invalid or inconsistent."""
