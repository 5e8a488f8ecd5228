"""Exception hierarchy shared by every daptain module."""


class DaptainError(Exception):
    """Base class for all library errors."""


class FormatError(DaptainError):
    """Malformed container or file header."""


class UnsupportedError(DaptainError):
    """Well-formed input using a codec or layout we do not handle."""


class DegenerateInputError(DaptainError, ValueError):
    """Input is valid in type but has no usable content (silence, too short)."""


class ShapeError(DaptainError, ValueError):
    pass


class NumericalError(DaptainError, FloatingPointError):
    """Non-finite values or a numerically degenerate decomposition."""


class TrainingError(DaptainError):
    """Training diverged or failed to converge.

    ``epoch`` and ``batch`` locate the failure when known.
    """

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ConfigError(DaptainError, ValueError):
    pass


class IntegrityError(DaptainError):
    """Checkpoint checksum or structure mismatch."""


class UndefinedMetricError(DaptainError, ValueError):
    pass


class DegenerateTestError(DaptainError, ValueError):
    pass
