"""Exception hierarchy.

Each module family has its own base class so the CLI can map failures to
distinct exit codes.
"""

from __future__ import annotations


class StreamwatchError(Exception):
    """Root of every error raised by this package."""

    exit_code = 10


# stream model


class StreamError(StreamwatchError):
    exit_code = 3


class EmptyStream(StreamError):
    pass


class QuestionBeforeAnySegment(StreamError):
    pass


class NonChronologicalTimestamps(StreamError):
    pass


class InvalidDurations(StreamError):
    pass


class UnorderedQuestionTimes(StreamError):
    pass


class InvalidUnit(StreamError):
    pass


class SpecFileError(StreamError):
    pass


# masks


class MaskError(StreamwatchError):
    exit_code = 4


class MissingGeneratedLengths(MaskError):
    pass


class UnsupportedShape(MaskError):
    pass


# positions


class PositionError(StreamwatchError):
    exit_code = 5


class LengthMismatch(PositionError):
    pass


class DimensionMismatch(PositionError):
    pass


class InvalidRopeConfig(PositionError):
    pass


# engine


class EngineError(StreamwatchError):
    exit_code = 6


class InvalidConfig(EngineError):
    pass


class OutOfOrderIngest(EngineError):
    pass


class OutOfOrderDecode(EngineError):
    pass


class SnapshotTooShort(EngineError):
    pass


class SnapshotTooLong(EngineError):
    pass


# pipeline


class PipelineError(StreamwatchError):
    exit_code = 7


class InvalidLengths(PipelineError):
    pass


class TurnNotFound(PipelineError):
    pass


class IndexGap(PipelineError):
    pass


class DuplicateNote(PipelineError):
    pass


# latency model


class LatencyError(StreamwatchError):
    exit_code = 8


class InvalidRates(LatencyError):
    pass


class InvalidHorizon(LatencyError):
    pass


# CoT documents


class CotError(StreamwatchError):
    exit_code = 9

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class CotSyntaxError(CotError):
    pass


class UnterminatedUnit(CotError):
    pass


class UnknownHeader(CotError):
    pass
