"""Pseudo-streaming CoT documents: parser, canonical serializer, validator.

A document lists the input units first (segment headers and question
blocks) and then one output chunk per input unit::

    [SEG 1 | time = 0-30 | frames = 30] <EOS>
    [Q 1 | t = 30]
    Question: ...
    Reference Answer: ...
    <EOQ>
    [SEG 1 THINK]
    Focus: ...
    Evidence from this segment: ...
    State update: ...
    <EOT>
    [Q 1 THINK]
    Reasoning: ...
    Answer: ...
    <EOQ>
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .errors import CotSyntaxError, UnknownHeader, UnterminatedUnit
from .stream import UnitStream


@dataclass(frozen=True)
class Delimiters:
    segment_end: str = "<EOS>"
    question_end: str = "<EOQ>"
    thought_end: str = "<EOT>"


class Profile(enum.Enum):
    """STRICT requires every delimiter. REDUCED lets a unit end at the next
    header or end of file, and serializes segment headers without one."""

    STRICT = "strict"
    REDUCED = "reduced"

    @classmethod
    def coerce(cls, value: "Profile | str") -> "Profile":
        return value if isinstance(value, cls) else cls(str(value).lower())


@dataclass(frozen=True)
class SegmentInput:
    index: int
    parts: tuple[str, ...]  # "key = value" items after the index, in order

    def attr(self, key: str) -> str | None:
        for part in self.parts:
            k, sep, v = part.partition("=")
            if sep and k.strip() == key:
                return v.strip()
        return None


@dataclass(frozen=True)
class QuestionInput:
    index: int
    parts: tuple[str, ...]
    question: str
    reference_answer: str


@dataclass(frozen=True)
class SegmentChunk:
    index: int
    focus: str
    evidence: str
    state_update: str


@dataclass(frozen=True)
class QaChunk:
    index: int
    reasoning: str
    answer: str


InputUnit = Union[SegmentInput, QuestionInput]
OutputChunk = Union[SegmentChunk, QaChunk]


@dataclass(frozen=True)
class CotDocument:
    input_units: tuple[InputUnit, ...]
    output_chunks: tuple[OutputChunk, ...]

    @property
    def n_segments(self) -> int:
        return sum(isinstance(u, SegmentInput) for u in self.input_units)

    @property
    def n_questions(self) -> int:
        return sum(isinstance(u, QuestionInput) for u in self.input_units)


QUESTION_FIELDS = (("Question", "question"), ("Reference Answer", "reference_answer"))
SEGMENT_FIELDS = (("Focus", "focus"), ("Evidence from this segment", "evidence"), ("State update", "state_update"))
QA_FIELDS = (("Reasoning", "reasoning"), ("Answer", "answer"))

_SEG_IN = re.compile(r"^\[SEG\s+(\d+)\s*\|(.*)\]\s*(\S+)?\s*$")
_Q_IN = re.compile(r"^\[Q\s+(\d+)\s*\|(.*)\]\s*$")
_SEG_OUT = re.compile(r"^\[SEG\s+(\d+)\s+THINK\]\s*$")
_Q_OUT = re.compile(r"^\[Q\s+(\d+)\s+THINK\]\s*$")


def _is_header(line: str) -> bool:
    s = line.strip()
    return any(p.match(s) for p in (_SEG_IN, _Q_IN, _SEG_OUT, _Q_OUT))


class _Parser:
    def __init__(self, text: str, delimiters: Delimiters, profile: Profile):
        self.lines = text.splitlines()
        self.d = delimiters
        self.profile = profile
        self.i = 0

    def _skip_blank(self) -> None:
        while self.i < len(self.lines) and not self.lines[self.i].strip():
            self.i += 1

    def parse(self) -> CotDocument:
        inputs: list[InputUnit] = []
        outputs: list[OutputChunk] = []
        while True:
            self._skip_blank()
            if self.i >= len(self.lines):
                break
            raw = self.lines[self.i]
            line = raw.strip()
            lineno = self.i + 1
            col = raw.index(line[0]) + 1
            if m := _SEG_OUT.match(line):
                self.i += 1
                outputs.append(self._block(int(m.group(1)), SEGMENT_FIELDS, SegmentChunk, self.d.thought_end, lineno))
            elif m := _Q_OUT.match(line):
                self.i += 1
                outputs.append(self._block(int(m.group(1)), QA_FIELDS, QaChunk, self.d.question_end, lineno))
            elif m := _SEG_IN.match(line):
                if outputs:
                    raise CotSyntaxError("input segment after the output section began", lineno, col)
                inputs.append(self._segment_header(m, lineno, col))
            elif m := _Q_IN.match(line):
                if outputs:
                    raise CotSyntaxError("input question after the output section began", lineno, col)
                self.i += 1
                parts = _split_parts(m.group(2))
                q = self._block(int(m.group(1)), QUESTION_FIELDS, dict, self.d.question_end, lineno)
                inputs.append(QuestionInput(int(m.group(1)), parts, q["question"], q["reference_answer"]))
            elif line.startswith("["):
                raise UnknownHeader(f"unrecognized header {line!r}", lineno, col)
            else:
                raise CotSyntaxError(f"text outside any unit: {line!r}", lineno, col)
        return CotDocument(tuple(inputs), tuple(outputs))

    def _segment_header(self, m: re.Match, lineno: int, col: int) -> SegmentInput:
        self.i += 1
        trailer = m.group(3)
        unit = SegmentInput(int(m.group(1)), _split_parts(m.group(2)))
        if trailer is not None:
            if trailer != self.d.segment_end:
                raise CotSyntaxError(f"expected {self.d.segment_end} after segment header, got {trailer!r}", lineno, col)
            return unit
        self._skip_blank()
        if self.i < len(self.lines) and self.lines[self.i].strip() == self.d.segment_end:
            self.i += 1
            return unit
        if self.profile is Profile.STRICT:
            raise UnterminatedUnit(f"segment {unit.index} is missing {self.d.segment_end}", lineno, col)
        return unit

    def _block(self, index, fields, build, end: str, lineno: int):
        labels = {label: attr for label, attr in fields}
        pattern = re.compile(r"^\s*(" + "|".join(re.escape(lbl) for lbl in labels) + r")\s*:(.*)$")
        other_ends = {self.d.segment_end, self.d.question_end, self.d.thought_end} - {end}
        values: dict[str, list[str]] = {}
        current: str | None = None
        terminated = False
        while self.i < len(self.lines):
            raw = self.lines[self.i]
            line = raw.strip()
            if line == end:
                self.i += 1
                terminated = True
                break
            if line in other_ends:
                raise CotSyntaxError(f"expected {end}, found {line}", self.i + 1, raw.index(line) + 1)
            if _is_header(line):
                break
            self.i += 1
            if not line:
                continue
            if line.endswith(end) and pattern.match(raw) is None and current is not None:
                # delimiter glued to the last content line
                values[current].append(line[: -len(end)].rstrip())
                terminated = True
                break
            m = pattern.match(raw)
            if m:
                label = m.group(1)
                if labels[label] in values:
                    raise CotSyntaxError(f"duplicate field {label!r}", self.i, 1)
                current = labels[label]
                body = m.group(2).strip()
                if body.endswith(end):
                    values[current] = [body[: -len(end)].rstrip()]
                    terminated = True
                    break
                values[current] = [body]
            elif current is None:
                raise CotSyntaxError(f"content before any field: {line!r}", self.i, 1)
            else:
                values[current].append(line)
        if not terminated and self.profile is Profile.STRICT:
            raise UnterminatedUnit(f"unit opened at line {lineno} is missing {end}", lineno, 1)
        missing = [label for label, attr in fields if attr not in values]
        if missing:
            raise CotSyntaxError(f"unit missing field(s) {', '.join(missing)}", lineno, 1)
        kwargs = {attr: "\n".join(x for x in values[attr] if x) for attr in values}
        if build is dict:
            return kwargs
        return build(index, **kwargs)


def _split_parts(s: str) -> tuple[str, ...]:
    parts = tuple(" ".join(p.split()) for p in s.split("|"))
    return tuple(p for p in parts if p)


def parse(
    document: str,
    delimiters: Delimiters = Delimiters(),
    profile: Profile | str = Profile.STRICT,
) -> CotDocument:
    return _Parser(document, delimiters, Profile.coerce(profile)).parse()


def _field(label: str, value: str) -> list[str]:
    lines = value.split("\n") if value else [""]
    first = f"{label}: {lines[0]}" if lines[0] else f"{label}:"
    return [first, *lines[1:]]


def serialize(
    doc: CotDocument,
    delimiters: Delimiters = Delimiters(),
    profile: Profile | str = Profile.STRICT,
) -> str:
    """Canonical text form; ``serialize(parse(t))`` is the canonical form of ``t``."""
    profile = Profile.coerce(profile)
    d = delimiters
    out: list[str] = []
    for unit in doc.input_units:
        if isinstance(unit, SegmentInput):
            head = " | ".join((f"[SEG {unit.index}", *unit.parts)) + "]"
            out.append(head + (f" {d.segment_end}" if profile is Profile.STRICT else ""))
        else:
            out.append(" | ".join((f"[Q {unit.index}", *unit.parts)) + "]")
            out += _field("Question", unit.question)
            out += _field("Reference Answer", unit.reference_answer)
            out.append(d.question_end)
    for chunk in doc.output_chunks:
        if isinstance(chunk, SegmentChunk):
            out.append(f"[SEG {chunk.index} THINK]")
            for label, attr in SEGMENT_FIELDS:
                out += _field(label, getattr(chunk, attr))
            out.append(d.thought_end)
        else:
            out.append(f"[Q {chunk.index} THINK]")
            for label, attr in QA_FIELDS:
                out += _field(label, getattr(chunk, attr))
            out.append(d.question_end)
    return "\n".join(out) + "\n"


def canonical(
    text: str,
    delimiters: Delimiters = Delimiters(),
    profile: Profile | str = Profile.STRICT,
) -> str:
    return serialize(parse(text, delimiters, profile), delimiters, profile)


# --- validation ---------------------------------------------------------------

CHECKED = ("A", "B", "C", "D", "G")
NOT_CHECKABLE = ("E", "F")

_SEG_REF = re.compile(r"\bSEG\s*(\d+)")
_Q_REF = re.compile(r"\bQ\s*(\d+)\b")


@dataclass(frozen=True)
class Violation:
    constraint: str  # A-G, or "S" for input numbering
    unit: int  # 1-based position in stream order
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]
    checked: tuple[str, ...] = CHECKED
    not_checkable: tuple[str, ...] = NOT_CHECKABLE

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def constraints(self) -> set[str]:
        return {v.constraint for v in self.violations}


def _signature(item: InputUnit | OutputChunk) -> tuple[str, int]:
    kind = "SEG" if isinstance(item, (SegmentInput, SegmentChunk)) else "Q"
    return kind, item.index


def contains_verbatim(text: str, needle: str) -> bool:
    """Occurrence of ``needle`` in ``text`` not glued to surrounding word characters."""
    needle = needle.strip()
    if not needle:
        return False
    left = r"(?<!\w)" if re.match(r"\w", needle[0]) else ""
    right = r"(?!\w)" if re.match(r"\w", needle[-1]) else ""
    return re.search(left + re.escape(needle) + right, text) is not None


def _reasoning_text(chunk: OutputChunk) -> list[str]:
    if isinstance(chunk, SegmentChunk):
        return [chunk.focus, chunk.evidence, chunk.state_update]
    return [chunk.reasoning]


def validate(doc: CotDocument) -> ValidationReport:
    v: list[Violation] = []
    ins, outs = doc.input_units, doc.output_chunks

    # input numbering
    seen = {"SEG": 0, "Q": 0}
    for pos, unit in enumerate(ins, start=1):
        kind, idx = _signature(unit)
        seen[kind] += 1
        if idx != seen[kind]:
            v.append(Violation("S", pos, f"input {kind} {idx} out of sequence (expected {seen[kind]})"))

    # A: one chunk per input unit, same order
    sig_in = [_signature(u) for u in ins]
    sig_out = [_signature(c) for c in outs]
    if len(sig_in) != len(sig_out):
        v.append(Violation("A", min(len(sig_in), len(sig_out)) + 1,
                           f"{len(sig_out)} output chunks for {len(sig_in)} input units"))
    for pos, (a, b) in enumerate(zip(sig_in, sig_out), start=1):
        if a != b:
            v.append(Violation("A", pos, f"chunk {b[0]} {b[1]} where {a[0]} {a[1]} is expected"))

    # stream context at each position
    segs_seen, qs_seen = [], []
    s = q = 0
    for unit in ins:
        if isinstance(unit, SegmentInput):
            s += 1
        else:
            q += 1
        segs_seen.append(s)
        qs_seen.append(q)

    refs = {u.index: u.reference_answer for u in ins if isinstance(u, QuestionInput)}

    for pos, chunk in enumerate(outs, start=1):
        ctx = min(pos, len(ins)) - 1
        n_seg = segs_seen[ctx] if ctx >= 0 else 0
        n_q = qs_seen[ctx] if ctx >= 0 else 0
        texts = _reasoning_text(chunk)

        if isinstance(chunk, SegmentChunk):
            if not chunk.evidence.strip():
                v.append(Violation("B", pos, f"SEG {chunk.index} has empty evidence"))
            if not chunk.state_update.strip():
                v.append(Violation("B", pos, f"SEG {chunk.index} has empty state update"))
            if not chunk.focus.strip():
                v.append(Violation("G", pos, f"SEG {chunk.index} has empty focus"))

        future_seg = sorted({int(k) for t in texts for k in _SEG_REF.findall(t) if int(k) > n_seg})
        future_q = sorted({int(j) for t in texts for j in _Q_REF.findall(t) if int(j) > n_q})
        if future_seg:
            v.append(Violation("C", pos, f"references future segment(s) {future_seg}"))
        if future_q:
            v.append(Violation("C", pos, f"references future question(s) {future_q}"))

        if isinstance(chunk, SegmentChunk):
            for j, ref in refs.items():
                if any(contains_verbatim(t, ref) for t in texts):
                    v.append(Violation("D", pos, f"segment reasoning reveals the answer to Q {j}"))
        else:
            ref = refs.get(chunk.index)
            if ref is not None:
                if contains_verbatim(chunk.reasoning, ref):
                    v.append(Violation("D", pos, f"Q {chunk.index} reasoning reveals its answer"))
                if chunk.answer.strip() != ref.strip():
                    v.append(Violation("D", pos, f"Q {chunk.index} answer differs from the reference"))
    return ValidationReport(tuple(v))


# --- skeleton synthesis -------------------------------------------------------

_FILLERS = (
    "The scene is observed and the tracked state is kept consistent.",
    "Visible content stays stable relative to earlier observations.",
    "Observed motion continues and no boundary cue appears.",
)


def _safe_text(candidates: Iterable[str], forbidden: Sequence[str]) -> str:
    for text in candidates:
        if not any(contains_verbatim(text, f) for f in forbidden):
            return text
    used = set("".join(forbidden))
    code = 0x61
    while chr(code) in used or not chr(code).isalpha():
        code += 1
    return " ".join([chr(code) * 3] * 3)


def synthesize_skeleton(
    stream: UnitStream,
    answers: Sequence[str],
    questions: Sequence[str] | None = None,
    delimiters: Delimiters = Delimiters(),
    profile: Profile | str = Profile.STRICT,
) -> str:
    """Structurally valid document with placeholder reasoning for ``stream``."""
    if len(answers) != stream.n_questions:
        raise ValueError(f"{len(answers)} answers for {stream.n_questions} questions")
    answers = [str(a).strip() for a in answers]
    ins: list[InputUnit] = []
    outs: list[OutputChunk] = []
    n_seg = n_q = 0
    last_end: float | None = None
    for unit in stream.received:
        if unit.is_segment:
            n_seg += 1
            parts = []
            if unit.wall_time_span is not None:
                a, b = unit.wall_time_span
                parts.append(f"time = {a:g}-{b:g}")
                last_end = b
            parts.append(f"frames = {unit.grid.t_len}")
            ins.append(SegmentInput(n_seg, tuple(parts)))
            focus = (
                "video understanding (no question yet)"
                if n_q == 0
                else f"evidence relevant to Q {n_q}"
            )
            focus = _safe_text([focus], answers)
            evidence = _safe_text([f"Segment {n_seg} is inspected. " + _FILLERS[n_seg % 3]], answers)
            state = _safe_text([_FILLERS[(n_seg + 1) % 3], *_FILLERS], answers)
            outs.append(SegmentChunk(n_seg, focus, evidence, state))
        else:
            n_q += 1
            when = unit.question_time if unit.question_time is not None else last_end
            parts = (f"t = {when:g}" if when is not None else "t = unknown",)
            qtext = questions[n_q - 1] if questions is not None else f"What happens in the video so far, item {n_q}?"
            ins.append(QuestionInput(n_q, parts, qtext, answers[n_q - 1]))
            reasoning = _safe_text(
                [f"Evidence gathered up to SEG {n_seg} supports the answer. " + _FILLERS[0], *_FILLERS],
                answers,
            )
            outs.append(QaChunk(n_q, reasoning, answers[n_q - 1]))
    return serialize(CotDocument(tuple(ins), tuple(outs)), delimiters, profile)
