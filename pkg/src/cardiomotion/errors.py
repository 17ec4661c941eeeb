"""Exception hierarchy shared across the toolkit.

Every error raised by library code derives from :class:`CardioMotionError`
so callers (and the CLI) can translate failures into exit codes without
matching on message text.
"""


class CardioMotionError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameter(CardioMotionError):
    """An argument violates a documented precondition."""


class FormatError(CardioMotionError):
    """A file does not parse as the expected format."""


class UnsupportedFormat(CardioMotionError):
    """The file parses but uses a variant we do not handle (e.g. color)."""


class TruncatedFile(CardioMotionError):
    """Payload size disagrees with the file header."""


class CannotAggregate(CardioMotionError):
    """Correlation pyramid cannot grow another level for this image size."""


class NumericalDivergence(CardioMotionError):
    """A solver or training loop produced non-finite values."""


class NoMotionDetected(CardioMotionError):
    """Localization found no temporal intensity variation to lock onto."""


class DegenerateLabels(CardioMotionError):
    """Training data lacks one of the two pixel classes."""


class UnsupportedVersion(CardioMotionError):
    """Persisted model uses a format version this build does not read."""


class CorruptModel(CardioMotionError):
    """Persisted model fails structural validation."""
