"""Interleaved stream data model, online segmentation and frame sampling."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

from .errors import (
    EmptyStream,
    InvalidDurations,
    InvalidUnit,
    NonChronologicalTimestamps,
    QuestionBeforeAnySegment,
    SpecFileError,
    UnorderedQuestionTimes,
)


class UnitKind(enum.Enum):
    SEGMENT = "segment"
    QUESTION = "question"


class OutputKind(enum.Enum):
    MEMORY_NOTE = "memory_note"
    QA_OUTPUT = "qa_output"


@dataclass(frozen=True)
class VisualGrid:
    """Visual token grid of one segment, in tokens along (t, h, w)."""

    t_len: int
    h_len: int
    w_len: int

    def __post_init__(self) -> None:
        for name in ("t_len", "h_len", "w_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidUnit(f"grid {name} must be a positive integer, got {value!r}")

    @property
    def n_tokens(self) -> int:
        return self.t_len * self.h_len * self.w_len

    def coords(self) -> list[tuple[int, int, int]]:
        """Local 0-based (t, h, w) coordinates in row-major token order."""
        return [
            (t, h, w)
            for t in range(self.t_len)
            for h in range(self.h_len)
            for w in range(self.w_len)
        ]


def default_token_ids(arrival_index: int, n: int) -> tuple[int, ...]:
    """Deterministic opaque token ids for a unit whose payload ids were not given."""
    return tuple((arrival_index * 1_000_003 + j * 7919 + 17) % 65521 for j in range(n))


@dataclass(frozen=True)
class ReceivedUnit:
    kind: UnitKind
    arrival_index: int
    tokens: tuple[int, ...]
    grid: VisualGrid | None = None
    wall_time_span: tuple[float, float] | None = None
    question_time: float | None = None

    def __post_init__(self) -> None:
        if self.arrival_index < 1:
            raise InvalidUnit("arrival_index is 1-based")
        if any(t < 0 for t in self.tokens):
            raise InvalidUnit("token ids must be non-negative")
        if self.kind is UnitKind.SEGMENT:
            if self.grid is None:
                raise InvalidUnit("segment unit needs a grid")
            if len(self.tokens) != self.grid.n_tokens:
                raise InvalidUnit(
                    f"segment {self.arrival_index} has {len(self.tokens)} token ids "
                    f"for a grid of {self.grid.n_tokens}"
                )
        else:
            if self.grid is not None:
                raise InvalidUnit("question unit cannot carry a grid")
            if not self.tokens:
                raise InvalidUnit("question payload must be non-empty")

    @property
    def is_segment(self) -> bool:
        return self.kind is UnitKind.SEGMENT

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class GeneratedUnit:
    """Output aligned to one received unit.

    For QA outputs ``answer_start`` splits ``tokens`` into the rationale
    ``tokens[:answer_start]`` and the answer ``tokens[answer_start:]``.
    """

    aligned_index: int
    kind: OutputKind
    tokens: tuple[int, ...]
    answer_start: int | None = None

    def __post_init__(self) -> None:
        if self.kind is OutputKind.QA_OUTPUT:
            start = 0 if self.answer_start is None else self.answer_start
            if not 0 <= start <= len(self.tokens):
                raise InvalidUnit("answer_start outside the token list")
            object.__setattr__(self, "answer_start", start)
        elif self.answer_start is not None:
            raise InvalidUnit("memory notes have no answer span")

    @property
    def rationale(self) -> tuple[int, ...]:
        return self.tokens[: self.answer_start or 0]

    @property
    def answer(self) -> tuple[int, ...]:
        return self.tokens[self.answer_start or 0 :]


@dataclass(frozen=True)
class QuestionTurn:
    arrival_index: int  # idx[Q_r]
    latest_segment: int  # tau_r


@dataclass(frozen=True)
class UnitStream:
    received: tuple[ReceivedUnit, ...]
    generated: tuple[GeneratedUnit, ...] = ()
    question_turns: tuple[QuestionTurn, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.received:
            raise EmptyStream("stream has no units")
        for u, unit in enumerate(self.received, start=1):
            if unit.arrival_index != u:
                raise InvalidUnit(f"unit at position {u} has arrival index {unit.arrival_index}")
        if len(self.generated) > len(self.received):
            raise InvalidUnit("more generated units than received units")
        for u, (rec, gen) in enumerate(zip(self.received, self.generated), start=1):
            if gen.aligned_index != u:
                raise InvalidUnit(f"generated unit {gen.aligned_index} is not aligned to {u}")
            expected = OutputKind.MEMORY_NOTE if rec.is_segment else OutputKind.QA_OUTPUT
            if gen.kind is not expected:
                raise InvalidUnit(f"unit {u}: {rec.kind.value} must produce {expected.value}")
        turns = _question_turns(self.received)
        if self.question_turns and tuple(self.question_turns) != turns:
            raise InvalidUnit("question_turns inconsistent with received units")
        object.__setattr__(self, "question_turns", turns)

    @property
    def n_units(self) -> int:
        return len(self.received)

    @property
    def n_questions(self) -> int:
        return len(self.question_turns)

    @property
    def segments(self) -> list[ReceivedUnit]:
        return [u for u in self.received if u.is_segment]

    @property
    def questions(self) -> list[ReceivedUnit]:
        return [u for u in self.received if not u.is_segment]

    def unit(self, u: int) -> ReceivedUnit:
        return self.received[u - 1]

    def spans(self) -> list[int]:
        return [unit_span(unit) for unit in self.received]

    def with_generated(self, generated: Iterable[GeneratedUnit]) -> "UnitStream":
        return UnitStream(self.received, tuple(generated))

    def with_generated_tokens(self, token_lists: Sequence[Sequence[int]]) -> "UnitStream":
        """Attach generated units built from raw token lists (a prefix is allowed)."""
        gen = []
        for u, toks in enumerate(token_lists, start=1):
            kind = OutputKind.MEMORY_NOTE if self.unit(u).is_segment else OutputKind.QA_OUTPUT
            gen.append(GeneratedUnit(u, kind, tuple(int(t) for t in toks)))
        return self.with_generated(gen)

    def generated_lens(self) -> list[int]:
        return [len(g.tokens) for g in self.generated]


def _question_turns(received: Sequence[ReceivedUnit]) -> tuple[QuestionTurn, ...]:
    turns = []
    n_segments = 0
    for unit in received:
        if unit.is_segment:
            n_segments += 1
        else:
            if n_segments == 0:
                raise QuestionBeforeAnySegment(
                    f"question at arrival index {unit.arrival_index} precedes every segment"
                )
            turns.append(QuestionTurn(unit.arrival_index, n_segments))
    return tuple(turns)


def unit_span(unit: ReceivedUnit) -> int:
    """Input-position budget of a received unit."""
    if unit.is_segment:
        g = unit.grid
        return max(g.t_len, g.h_len, g.w_len)
    return len(unit.tokens)


# --- descriptors -----------------------------------------------------------


@dataclass(frozen=True)
class SegmentDesc:
    grid: tuple[int, int, int]
    time: tuple[float, float] | None = None
    tokens: tuple[int, ...] | None = None


@dataclass(frozen=True)
class QuestionDesc:
    length: int | None = None
    time: float | None = None
    tokens: tuple[int, ...] | None = None


Descriptor = Union[SegmentDesc, QuestionDesc, Mapping[str, Any]]


def _coerce(desc: Descriptor) -> SegmentDesc | QuestionDesc:
    if isinstance(desc, (SegmentDesc, QuestionDesc)):
        return desc
    if not isinstance(desc, Mapping):
        raise InvalidUnit(f"unrecognized descriptor {desc!r}")
    kind = desc.get("kind")
    tokens = desc.get("tokens")
    tokens = tuple(int(t) for t in tokens) if tokens is not None else None
    if kind == "segment":
        grid = desc.get("grid")
        if grid is None or len(grid) != 3:
            raise InvalidUnit("segment descriptor needs grid [t, h, w]")
        time = desc.get("time")
        if time is not None:
            if len(time) != 2:
                raise InvalidUnit("segment time must be [start_s, end_s]")
            time = (float(time[0]), float(time[1]))
        return SegmentDesc(tuple(int(x) for x in grid), time, tokens)
    if kind == "question":
        length = desc.get("len")
        time = desc.get("time")
        return QuestionDesc(
            int(length) if length is not None else None,
            float(time) if time is not None else None,
            tokens,
        )
    raise InvalidUnit(f"descriptor kind must be 'segment' or 'question', got {kind!r}")


def build_stream(events: Iterable[Descriptor]) -> UnitStream:
    """Assign arrival indices to descriptors given in arrival order."""
    received: list[ReceivedUnit] = []
    seg_clock: float | None = None  # end of the latest timed segment
    q_clock: float | None = None
    for u, raw in enumerate(events, start=1):
        desc = _coerce(raw)
        if isinstance(desc, SegmentDesc):
            grid = VisualGrid(*desc.grid)
            tokens = desc.tokens if desc.tokens is not None else default_token_ids(u, grid.n_tokens)
            if desc.time is not None:
                start, end = desc.time
                if end <= start:
                    raise NonChronologicalTimestamps(f"segment {u} span {desc.time} is empty or reversed")
                if seg_clock is not None and start < seg_clock:
                    raise NonChronologicalTimestamps(f"segment {u} starts at {start} before {seg_clock}")
                seg_clock = end
            received.append(ReceivedUnit(UnitKind.SEGMENT, u, tokens, grid, desc.time))
        else:
            if desc.tokens is not None:
                tokens = desc.tokens
                if desc.length is not None and desc.length != len(tokens):
                    raise InvalidUnit(f"question {u}: len disagrees with token list")
            else:
                if desc.length is None or desc.length < 1:
                    raise InvalidUnit(f"question {u} needs a positive length")
                tokens = default_token_ids(u, desc.length)
            if desc.time is not None:
                # a question may fall inside the next segment's span, never before the last finished one
                floor = max((t for t in (seg_clock, q_clock) if t is not None), default=None)
                if floor is not None and desc.time < floor:
                    raise NonChronologicalTimestamps(f"question {u} at {desc.time} precedes {floor}")
                q_clock = desc.time
            received.append(ReceivedUnit(UnitKind.QUESTION, u, tuple(tokens), None, None, desc.time))
    if not received:
        raise EmptyStream("stream has no units")
    return UnitStream(tuple(received))


def interleave(segments: Sequence[SegmentDesc], questions: Sequence[QuestionDesc]) -> list[SegmentDesc | QuestionDesc]:
    """Merge timed segments and questions into arrival order.

    A question at time t follows every segment ending at or before t; several
    questions at one timestamp keep their input order.
    """
    if any(s.time is None for s in segments) or any(q.time is None for q in questions):
        raise InvalidUnit("interleave needs timestamps on every descriptor")
    out: list[SegmentDesc | QuestionDesc] = []
    qi = 0
    for seg in segments:
        while qi < len(questions) and questions[qi].time < seg.time[1]:
            out.append(questions[qi])
            qi += 1
        out.append(seg)
    out.extend(questions[qi:])
    return out


# --- online segmentation and sampling --------------------------------------


def segment_by_questions(
    video_duration_s: float,
    question_times_s: Sequence[float],
    max_segment_s: float = 60.0,
    chunk_s: float = 30.0,
) -> list[tuple[float, float]]:
    """Cut [0, duration] at question times; split overlong pieces into chunks."""
    if not video_duration_s > 0 or not math.isfinite(video_duration_s):
        raise InvalidDurations(f"video duration must be positive, got {video_duration_s}")
    if not (max_segment_s > chunk_s > 0):
        raise InvalidDurations("need max_segment_s > chunk_s > 0")
    prev = None
    for t in question_times_s:
        if prev is not None and t <= prev:
            raise UnorderedQuestionTimes(f"question times must strictly increase: {list(question_times_s)}")
        if not 0 < t <= video_duration_s:
            raise InvalidDurations(f"question time {t} outside (0, {video_duration_s}]")
        prev = t
    bounds = [0.0, *(float(t) for t in question_times_s)]
    if bounds[-1] < video_duration_s:
        bounds.append(float(video_duration_s))
    pieces: list[tuple[float, float]] = []
    for start, end in zip(bounds, bounds[1:]):
        if end - start > max_segment_s:
            n_full = int((end - start) // chunk_s)
            cuts = [start + k * chunk_s for k in range(n_full + 1)]
            # absorb float residue so no sliver piece is emitted
            if end - cuts[-1] <= 1e-9 * max(1.0, end):
                cuts[-1] = end
            else:
                cuts.append(end)
            pieces.extend(zip(cuts, cuts[1:]))
        else:
            pieces.append((start, end))
    return pieces


@dataclass(frozen=True)
class SamplingPlan:
    fps: Fraction
    max_frames: int | None = None

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise InvalidDurations("fps must be positive")
        if self.max_frames is not None and self.max_frames < 1:
            raise InvalidDurations("max_frames must be >= 1")

    def n_frames(self, duration_s: float) -> int:
        n = math.floor(Fraction(duration_s).limit_denominator(10**6) * self.fps)
        if self.max_frames is not None:
            n = min(n, self.max_frames)
        return n


def plan_sampling(video_duration_s: float, frame_cap: int | None = None) -> SamplingPlan:
    """Adaptive frame-rate tiers: 1 fps under 5 min, 0.5 fps under 10 min, else 0.2 fps."""
    if not video_duration_s > 0:
        raise InvalidDurations(f"video duration must be positive, got {video_duration_s}")
    if video_duration_s < 300:
        fps = Fraction(1)
    elif video_duration_s < 600:
        fps = Fraction(1, 2)
    else:
        fps = Fraction(1, 5)
    return SamplingPlan(fps, frame_cap)


# --- stream specification files --------------------------------------------


@dataclass(frozen=True)
class StreamSpec:
    stream: UnitStream
    generated_lens: tuple[int, ...] | None = None
    answers: tuple[str, ...] | None = None
    questions_text: tuple[str, ...] | None = None


def parse_stream_spec(doc: Mapping[str, Any]) -> StreamSpec:
    if not isinstance(doc, Mapping) or "units" not in doc:
        raise SpecFileError('stream spec needs a top-level "units" array')
    units = doc["units"]
    if not isinstance(units, list):
        raise SpecFileError('"units" must be an array')
    stream = build_stream(units)
    lens = doc.get("generated_lens")
    if lens is not None:
        if not isinstance(lens, list) or any(not isinstance(x, int) or x < 0 for x in lens):
            raise SpecFileError('"generated_lens" must be an array of non-negative integers')
        if len(lens) > stream.n_units:
            raise SpecFileError('"generated_lens" is longer than "units"')
        lens = tuple(lens)
    answers = doc.get("answers")
    if answers is not None:
        if len(answers) != stream.n_questions:
            raise SpecFileError('"answers" needs one entry per question')
        answers = tuple(str(a) for a in answers)
    qtext = doc.get("questions")
    if qtext is not None:
        if len(qtext) != stream.n_questions:
            raise SpecFileError('"questions" needs one entry per question')
        qtext = tuple(str(q) for q in qtext)
    return StreamSpec(stream, lens, answers, qtext)


def load_stream_spec(path: str | Path) -> StreamSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecFileError(f"cannot read stream spec {path}: {exc}") from exc
    return parse_stream_spec(doc)
