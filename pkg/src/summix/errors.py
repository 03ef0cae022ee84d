"""Exception hierarchy shared by every summix module."""


class SummixError(Exception):
    """Base class for all library errors."""


class ValidationError(SummixError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent with each other."""


class FormatError(SummixError):
    """A binary file does not follow the expected layout."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class MeasurementError(SummixError):
    """A timing measurement is too short to be meaningful."""
