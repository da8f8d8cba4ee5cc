"""Exception hierarchy shared by all modules."""


class UisRnnError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(UisRnnError, ValueError):
    """Input violates a documented precondition."""


class ParseError(UisRnnError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(UisRnnError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionMismatchError(FormatError, ValueError):
    pass


class VersionMismatchError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class CorruptCheckpointError(FormatError):
    pass


class DivergenceError(UisRnnError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
