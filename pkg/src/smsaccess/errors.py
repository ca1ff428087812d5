"""Exception hierarchy shared by every stage."""


class SmsAccessError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(SmsAccessError, ValueError):
    pass


class OutOfBoundsError(SmsAccessError, ValueError):
    pass


class FormatError(SmsAccessError):
    """An input file is missing, unreadable, or violates its schema."""


class InsufficientDataError(SmsAccessError):
    pass


class SingularSystemError(SmsAccessError):
    """The kriging system could not be solved reliably."""


class StageError(SmsAccessError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: str):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
