"""Exception types raised across the package.

CLI exit codes: ``InvalidConfig`` -> 1 (usage), ``CheckFailure`` -> 3, any other
``AveError`` (bad files, mismatched weights, numerical failures) -> 2.
"""


class AveError(Exception):
    """Base class for every error raised by ave3net."""


class DataError(AveError):
    """Bad input data or file contents."""


class CheckFailure(AveError):
    """A verification (gradient check, equivalence check) did not pass."""


class ShapeMismatch(AveError, ValueError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class NotScalarLoss(AveError, ValueError):
    pass


class EmptyTape(AveError, RuntimeError):
    pass


class NonDeterministicFunction(AveError, RuntimeError):
    pass


class InputTooShort(AveError, ValueError):
    pass


class NotDivisible(AveError, ValueError):
    pass


class InvalidConfig(AveError, ValueError):
    pass


class BadFrameShape(AveError, ValueError):
    pass


class SessionPoisoned(AveError, RuntimeError):
    pass


class TimestampRegression(AveError, ValueError):
    pass


class AlreadyFinished(AveError, RuntimeError):
    pass


class LengthMismatch(AveError, ValueError):
    pass


class ZeroReference(AveError, ValueError):
    pass


class PositionOutOfRoom(AveError, ValueError):
    pass


class SilentSource(DataError, ValueError):
    pass


class UnsupportedFormat(DataError):
    pass


class UnsupportedSampleRate(UnsupportedFormat):
    pass


class CorruptHeader(DataError):
    pass


class BadMagic(DataError):
    pass


class UnexpectedEof(DataError):
    pass


class UnknownTensor(DataError):
    pass


class NonFiniteLoss(AveError, FloatingPointError):
    pass
