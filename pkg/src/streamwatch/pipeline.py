"""Watch-while-think scheduling over a unit stream.

A token clock drives two tracks: ingestion of received units and decoding of
generated units. Each token processed costs one tick; in decoupled mode both
tracks can run in the same tick. The schedule decides only *when* work
happens; what each generated unit may see is fixed by the snapshot rule.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from statistics import fmean
from typing import Sequence

import numpy as np

from .engine import (
    DecodeResult,
    DualKvCache,
    Engine,
    Greedy,
    Teacher,
    decode_unit,
    ingest_unit,
)
from .errors import DuplicateNote, IndexGap, InvalidLengths, TurnNotFound
from .mask import WithinUnit
from .stream import UnitStream


class PipelineMode(enum.Enum):
    INTERLEAVED = "interleaved"
    DECOUPLED = "decoupled"
    BATCH = "batch"

    @classmethod
    def coerce(cls, value: "PipelineMode | str") -> "PipelineMode":
        return value if isinstance(value, cls) else cls(str(value).lower())


class EventKind(enum.Enum):
    ARRIVAL = "Arrival"
    INGEST_START = "IngestStart"
    INGEST_END = "IngestEnd"
    DECODE_START = "DecodeStart"
    DECODE_TOKEN = "DecodeToken"
    DECODE_END = "DecodeEnd"
    FIRST_ANSWER_TOKEN = "FirstAnswerToken"


@dataclass(frozen=True)
class ScheduleEvent:
    kind: EventKind
    unit_index: int
    clock: int
    turn: int | None = None


@dataclass(frozen=True)
class MemoryBank:
    notes: tuple[tuple[int, tuple[int, ...]], ...] = ()

    def __len__(self) -> int:
        return len(self.notes)

    def note(self, i: int) -> tuple[int, ...]:
        return self.notes[i - 1][1]


def memory_write(bank: MemoryBank, segment_index: int, note: Sequence[int]) -> MemoryBank:
    """Return a bank with note ``segment_index`` appended; earlier notes are shared."""
    if 1 <= segment_index <= len(bank):
        raise DuplicateNote(f"note {segment_index} already written")
    if segment_index != len(bank) + 1:
        raise IndexGap(f"bank holds {len(bank)} notes; cannot write note {segment_index}")
    return MemoryBank(bank.notes + ((segment_index, tuple(int(t) for t in note)),))


@dataclass
class AnswerRecord:
    turn: int
    unit_index: int
    tokens: list[int]
    logits: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PipelineResult:
    bank: MemoryBank
    answers: list[AnswerRecord]
    events: list[ScheduleEvent]
    decoded: list[DecodeResult] = field(default_factory=list, repr=False)
    bank_sizes: list[int] = field(default_factory=list)


def _output_lengths(stream: UnitStream, note_len: int, answer_lens: Sequence[int]) -> list[int]:
    if note_len < 0:
        raise InvalidLengths(f"note_len must be >= 0, got {note_len}")
    if len(answer_lens) != stream.n_questions:
        raise InvalidLengths(f"{len(answer_lens)} answer lengths for {stream.n_questions} questions")
    if any(n < 1 for n in answer_lens):
        raise InvalidLengths("answer lengths must be positive")
    out, r = [], 0
    for unit in stream.received:
        if unit.is_segment:
            out.append(note_len)
        else:
            out.append(int(answer_lens[r]))
            r += 1
    return out


def _check_teacher(teacher: Sequence[Sequence[int]] | None, lens: list[int]) -> list[tuple[int, ...]] | None:
    if teacher is None:
        return None
    if len(teacher) != len(lens) or any(len(t) != n for t, n in zip(teacher, lens)):
        raise InvalidLengths("teacher token lists must match the scheduled output lengths")
    return [tuple(int(x) for x in t) for t in teacher]


def run_pipeline(
    engine: Engine | None,
    stream: UnitStream,
    mode: PipelineMode | str,
    note_len: int,
    answer_lens: Sequence[int],
    teacher: Sequence[Sequence[int]] | None = None,
    arrivals: Sequence[int] | None = None,
    within_received: WithinUnit | str = WithinUnit.CAUSAL,
) -> PipelineResult:
    """Simulate one run and, when an engine is given, compute its outputs.

    ``arrivals`` gives the token-clock time at which each received unit becomes
    available (default: all at 0, a pre-recorded stream). With ``engine=None``
    only the schedule is produced and notes hold teacher tokens or zeros.
    """
    mode = PipelineMode.coerce(mode)
    U = stream.n_units
    in_lens = [r.n_tokens for r in stream.received]
    out_lens = _output_lengths(stream, note_len, answer_lens)
    teacher = _check_teacher(teacher, out_lens)
    if arrivals is None:
        arrivals = [0] * U
    arrivals = [int(a) for a in arrivals]
    if len(arrivals) != U or any(a < 0 for a in arrivals) or any(b < a for a, b in zip(arrivals, arrivals[1:])):
        raise InvalidLengths("arrivals must be one non-negative, nondecreasing clock per received unit")

    turn_of = {t.arrival_index: r for r, t in enumerate(stream.question_turns, start=1)}
    seg_of = {}
    for unit in stream.received:
        if unit.is_segment:
            seg_of[unit.arrival_index] = len(seg_of) + 1

    cache = DualKvCache.for_engine(engine) if engine is not None else None
    events: list[ScheduleEvent] = []
    bank = MemoryBank()
    bank_sizes: list[int] = []
    answers: list[AnswerRecord] = []
    decoded: list[DecodeResult] = []

    def emit(kind: EventKind, u: int, t: int, turn: int | None = None) -> None:
        events.append(ScheduleEvent(kind, u, t, turn))

    clock = 0
    next_arrival = 1
    next_ing, ing_unit, ing_left = 1, None, 0
    next_dec, dec_unit, dec_left = 1, None, 0
    ingested = 0
    pending: DecodeResult | None = None

    def can_ingest(u: int) -> bool:
        if arrivals[u - 1] > clock:
            return False
        if mode is PipelineMode.INTERLEAVED:
            return dec_unit is None and next_dec == u
        return True

    def can_decode(u: int) -> bool:
        if mode is PipelineMode.BATCH:
            return ingested == U
        return ingested >= u

    def finish_decode(u: int) -> None:
        nonlocal bank
        emit(EventKind.DECODE_END, u, clock)
        if stream.unit(u).is_segment:
            if pending is not None:
                note = pending.tokens
            elif teacher is not None:
                note = teacher[u - 1]
            else:
                note = (0,) * out_lens[u - 1]
            bank = memory_write(bank, seg_of[u], note)
            bank_sizes.append(len(bank))
        else:
            answers.append(
                AnswerRecord(
                    turn_of[u],
                    u,
                    list(pending.tokens) if pending is not None else list(teacher[u - 1]) if teacher else [],
                    pending.logits if pending is not None else None,
                )
            )

    while True:
        while next_arrival <= U and arrivals[next_arrival - 1] <= clock:
            emit(EventKind.ARRIVAL, next_arrival, arrivals[next_arrival - 1])
            next_arrival += 1
        progressed = True
        while progressed:
            progressed = False
            if ing_unit is None and next_ing <= U and can_ingest(next_ing):
                ing_unit, ing_left = next_ing, in_lens[next_ing - 1]
                emit(EventKind.INGEST_START, ing_unit, clock)
                next_ing += 1
                progressed = True
            if dec_unit is None and next_dec <= U and can_decode(next_dec):
                u = next_dec
                emit(EventKind.DECODE_START, u, clock)
                if u in turn_of:
                    emit(EventKind.FIRST_ANSWER_TOKEN, u, clock, turn_of[u])
                pending = None
                if engine is not None:
                    m = Teacher(teacher[u - 1]) if teacher is not None else Greedy()
                    pending = decode_unit(engine, cache, u, out_lens[u - 1], m, snapshot=cache.source_snapshot(u))
                    decoded.append(pending)
                next_dec += 1
                if out_lens[u - 1] == 0:
                    finish_decode(u)
                else:
                    dec_unit, dec_left = u, out_lens[u - 1]
                progressed = True
        if ing_unit is None and dec_unit is None:
            if next_dec > U:
                break
            # idle until the next unit arrives
            clock = arrivals[next_ing - 1]
            continue
        clock += 1
        if ing_unit is not None:
            ing_left -= 1
            if ing_left == 0:
                emit(EventKind.INGEST_END, ing_unit, clock)
                if engine is not None:
                    ingest_unit(engine, cache, stream.unit(ing_unit), within_received=within_received)
                ingested += 1
                ing_unit = None
        if dec_unit is not None:
            dec_left -= 1
            emit(EventKind.DECODE_TOKEN, dec_unit, clock)
            if dec_left == 0:
                finish_decode(dec_unit)
                dec_unit = None

    return PipelineResult(bank, answers, events, decoded, bank_sizes)


def ttft(events: Sequence[ScheduleEvent], turn: int) -> int:
    """Tokens processed between a question's arrival and its first answer token."""
    first = next((e for e in events if e.kind is EventKind.FIRST_ANSWER_TOKEN and e.turn == turn), None)
    if first is None:
        raise TurnNotFound(f"no first answer token for turn {turn}")
    arrival = next(
        (e for e in events if e.kind is EventKind.ARRIVAL and e.unit_index == first.unit_index), None
    )
    if arrival is None:
        raise TurnNotFound(f"no arrival event for unit {first.unit_index}")
    return first.clock - arrival.clock


def ttft_summary(events: Sequence[ScheduleEvent]) -> tuple[list[int], float]:
    turns = sorted({e.turn for e in events if e.kind is EventKind.FIRST_ANSWER_TOKEN})
    values = [ttft(events, r) for r in turns]
    return values, (fmean(values) if values else float("nan"))


def run_concurrent(
    engine: Engine,
    stream: UnitStream,
    note_len: int,
    answer_lens: Sequence[int],
    teacher: Sequence[Sequence[int]] | None = None,
    within_received: WithinUnit | str = WithinUnit.CAUSAL,
    timeout: float = 60.0,
) -> PipelineResult:
    """Real two-thread execution: one ingestion writer, one decoding writer.

    The decoder takes its source snapshot for unit u only once R_u is in the
    cache, so outputs match the simulated schedules exactly. No event log is
    produced because there is no shared clock.
    """
    out_lens = _output_lengths(stream, note_len, answer_lens)
    teacher = _check_teacher(teacher, out_lens)
    cache = DualKvCache.for_engine(engine)
    errors: list[BaseException] = []

    def ingest_all() -> None:
        try:
            for unit in stream.received:
                ingest_unit(engine, cache, unit, within_received=within_received)
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    worker = threading.Thread(target=ingest_all, name="ingest", daemon=True)
    worker.start()
    decoded: list[DecodeResult] = []
    bank = MemoryBank()
    answers: list[AnswerRecord] = []
    n_seg = 0
    turn_of = {t.arrival_index: r for r, t in enumerate(stream.question_turns, start=1)}
    try:
        for unit in stream.received:
            u = unit.arrival_index
            snap = cache.wait_for_source(u, timeout)
            m = Teacher(teacher[u - 1]) if teacher is not None else Greedy()
            res = decode_unit(engine, cache, u, out_lens[u - 1], m, snapshot=snap)
            decoded.append(res)
            if unit.is_segment:
                n_seg += 1
                bank = memory_write(bank, n_seg, res.tokens)
            else:
                answers.append(AnswerRecord(turn_of[u], u, list(res.tokens), res.logits))
    finally:
        worker.join(timeout)
    if errors:
        raise errors[0]
    return PipelineResult(bank, answers, [], decoded)
