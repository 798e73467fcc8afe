"""Exception hierarchy.

Every error raised by the package derives from :class:`FininError`. The
four intermediate classes map onto the CLI exit-code taxonomy.
"""


class FininError(Exception):
    exit_code = 1


class ConfigError(FininError, ValueError):
    exit_code = 1


class DataError(FininError, ValueError):
    exit_code = 2


class NumericError(FininError, ArithmeticError):
    exit_code = 3


class IoFailure(FininError, OSError):
    exit_code = 4


# market data
class MalformedRow(DataError):
    pass


class MalformedRecord(DataError):
    pass


class ConstraintViolation(DataError):
    pass


class NonMonotonicDates(DataError):
    pass


class SentimentOutOfRange(DataError):
    pass


class EmptyCalendar(DataError):
    pass


class InvalidParameter(ConfigError):
    pass


# embeddings
class EmptyText(DataError):
    pass


class MalformedFile(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class _KeyMessage(KeyError):
    # KeyError would repr() the message; print it as written instead
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MissingKey(DataError, _KeyMessage):
    pass


class NotATradingDay(DataError, _KeyMessage):
    pass


# numerics / model
class ShapeMismatch(NumericError, ValueError):
    pass


class AllMasked(NumericError, ValueError):
    pass


class InsufficientHistory(DataError):
    pass


class NoNews(DataError):
    pass


class CheckpointMismatch(ConfigError):
    pass


# training / backtest
class EmptySplit(DataError):
    pass


class InsufficientData(DataError):
    pass


class MissingNextClose(DataError):
    pass


class DegenerateVariance(NumericError):
    pass


class TooFewDays(DataError):
    pass


class EmptyInput(DataError):
    pass
