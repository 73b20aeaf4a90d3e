"""Command-line entry point: ``streamwatch <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import cot
from .engine import DualKvCache, EngineConfig, Greedy, Teacher, decode_unit, ingest_unit, init_engine
from .errors import SpecFileError, StreamwatchError
from .latency import (
    LatencyMode,
    RateConfig,
    catch_up_closed_form,
    required_horizon,
    simulate,
)
from .mask import build_seg_mask, expand_token_mask
from .pipeline import PipelineMode, run_concurrent, run_pipeline, ttft_summary
from .rope import compute_offsets
from .stream import load_stream_spec, plan_sampling, segment_by_questions

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "within": "causal",
    "layers": 2,
    "heads": 2,
    "head_dim": 8,
    "vocab": 64,
    "gen_len": 2,
    "decode": "teacher",
    "mode": "interleaved",
    "note_len": 2,
    "answer_len": 4,
    "mu": None,
    "lambda_": None,
    "t_dec": None,
    "horizon": None,
    "sample_dt": 1.0,
    "decode_period": None,
    "overhead": 0.0,
    "arrivals": "deterministic",
    "profile": "strict",
    "max_segment": 60.0,
    "chunk": 30.0,
    "frame_cap": 64,
}


def fmt(x: float | int) -> str:
    """Fixed 6-significant-digit rendering used for every numeric output."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = f"{x:.6g}"
    return "0" if s == "-0" else s


class Settings:
    """Resolved options: explicit flags, then the config file, then defaults."""

    def __init__(self, args: argparse.Namespace, config: dict[str, Any]):
        self.args = args
        self.config = config

    def __getattr__(self, name: str) -> Any:
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        key = name.rstrip("_")
        for k in (key, key.replace("_", "-")):
            if k in self.config:
                return self.config[k]
        return DEFAULTS.get(name)


def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecFileError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecFileError("config file must hold a JSON object")
    return doc


def _csv_text(rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([fmt(x) if isinstance(x, (int, float, np.number)) and not isinstance(x, bool) else x for x in row])
    return buf.getvalue()


def _engine(s: Settings):
    return init_engine(EngineConfig(n_layers=s.layers, n_heads=s.heads, head_dim=s.head_dim, vocab_size=s.vocab, seed=s.seed))


# --- subcommands --------------------------------------------------------------


def cmd_mask(s: Settings) -> str:
    spec = load_stream_spec(s.args.spec)
    stream = spec.stream
    lens = list(spec.generated_lens or ())
    tm = expand_token_mask(build_seg_mask(stream), stream, s.within, lens)
    lines = [f"# mask q_len={tm.q_len} k_len={tm.k_len} within={s.within}"]
    lines += tm.to_bitmap()
    lines.append("# legend: index side unit offset")
    lines += [f"{i} {p.side} {p.unit} {p.offset}" for i, p in enumerate(tm.provenance)]
    return "\n".join(lines) + "\n"


def cmd_offsets(s: Settings) -> str:
    spec = load_stream_spec(s.args.spec)
    table = compute_offsets(spec.stream, spec.generated_lens or ())
    rows: list[list[Any]] = [["kind", "unit", "base_offset", "span"]]
    for unit, base, span in zip(spec.stream.received, table.unit_offsets, table.spans):
        rows.append(["segment" if unit.is_segment else "question", unit.arrival_index, base, span])
    for u, (base, n) in enumerate(zip(table.gen_offsets, table.gen_lens), start=1):
        rows.append(["generated", u, base, n])
    rows.append(["input_budget", "", table.input_budget, ""])
    return _csv_text(rows)


def _digest(logits: np.ndarray) -> tuple[str, list[str]]:
    flat = [fmt(v) for v in np.asarray(logits, dtype=np.float64).ravel()]
    h = hashlib.sha256(" ".join(flat).encode()).hexdigest()[:16]
    return h, flat[:8]


def cmd_run(s: Settings) -> str:
    spec = load_stream_spec(s.args.spec)
    stream = spec.stream
    lens = list(spec.generated_lens) if spec.generated_lens is not None else [s.gen_len] * stream.n_units
    engine = _engine(s)
    cache = DualKvCache.for_engine(engine)
    offsets = compute_offsets(stream, lens)
    rows: list[list[Any]] = [["side", "unit", "n_tokens", "digest", *[f"v{i}" for i in range(8)], "tokens"]]
    for r in stream.received:
        out = ingest_unit(engine, cache, r, offsets, s.within)
        h, head = _digest(out.logits)
        rows.append(["R", r.arrival_index, r.n_tokens, h, *head, *[""] * (8 - len(head)), ""])
        u = r.arrival_index
        if u > len(lens):
            continue
        mode = Greedy() if s.decode == "greedy" else Teacher([(u * 31 + j * 7) % s.vocab for j in range(lens[u - 1])])
        res = decode_unit(engine, cache, u, lens[u - 1], mode, offsets)
        h, head = _digest(res.logits)
        rows.append(["C", u, lens[u - 1], h, *head, *[""] * (8 - len(head)), " ".join(map(str, res.predictions))])
    return _csv_text(rows)


def cmd_pipeline(s: Settings) -> str:
    spec = load_stream_spec(s.args.spec)
    stream = spec.stream
    answer_lens = [s.answer_len] * stream.n_questions
    engine = _engine(s)
    rows: list[list[Any]] = []
    if s.args.concurrent:
        res = run_concurrent(engine, stream, s.note_len, answer_lens, within_received=s.within)
    else:
        res = run_pipeline(engine, stream, s.mode, s.note_len, answer_lens, within_received=s.within)
        rows.append(["kind", "unit", "clock"])
        rows += [[e.kind.value, e.unit_index, e.clock] for e in res.events]
        values, mean = ttft_summary(res.events)
        rows.append(["turn", "ttft", ""])
        rows += [[r, v, ""] for r, v in enumerate(values, start=1)]
        rows.append(["mean", mean, ""])
    rows.append(["answer_turn", "unit", "tokens"])
    rows += [[a.turn, a.unit_index, " ".join(map(str, a.tokens))] for a in res.answers]
    return _csv_text(rows)


def cmd_simulate(s: Settings) -> str:
    if s.lambda_ is None or s.mu is None or s.t_dec is None:
        raise _Usage("simulate needs --lambda, --mu and --t-dec (flags or config)")
    cfg = RateConfig(
        lambda_=float(s.lambda_),
        mu=float(s.mu),
        t_dec=float(s.t_dec),
        decode_period=s.decode_period,
        overhead_s=float(s.overhead),
    )
    horizon = s.horizon if s.horizon is not None else math.ceil(1.1 * required_horizon(cfg))
    mode = LatencyMode.coerce(s.mode)
    trace = simulate(cfg, mode, float(horizon), float(s.sample_dt), s.arrivals, s.seed)
    rows: list[list[Any]] = [["time_s", "backlog", "mode"]]
    rows += [[t, b, mode.value] for t, b in trace.samples]
    closed = catch_up_closed_form(cfg) if mode is LatencyMode.INTERLEAVED else 0.0
    measured = trace.catch_up_s
    if math.isfinite(closed) and closed > 0 and math.isfinite(measured):
        rel = abs(measured - closed) / closed
    else:
        rel = math.nan
    rows.append(["rho", "t_dec", "measured_catch_up", "closed_form", "rel_err"])
    rows.append([cfg.rho, cfg.t_dec, measured, closed, rel])
    return _csv_text(rows)


def cmd_validate_cot(s: Settings) -> tuple[str, int]:
    rows: list[list[Any]] = []
    failed = 0
    for path in s.args.files:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise SpecFileError(f"cannot read {path}: {exc}") from exc
        try:
            report = cot.validate(cot.parse(text, profile=s.profile))
        except StreamwatchError as exc:
            failed += 1
            rows.append([path, "syntax", 0, str(exc)])
            continue
        if not report.passed:
            failed += 1
        rows += [[path, v.constraint, v.unit, v.message] for v in report.violations]
    out = _csv_text(rows)
    out += f"# files={len(s.args.files)} failed={failed} not_checkable={','.join(cot.NOT_CHECKABLE)}\n"
    return out, (1 if failed else 0)


def _synth_one(path: str, profile: str) -> str:
    spec = load_stream_spec(path)
    answers = spec.answers or tuple(f"answer {j}" for j in range(1, spec.stream.n_questions + 1))
    return cot.synthesize_skeleton(spec.stream, answers, spec.questions_text, profile=profile)


def cmd_synth_cot(s: Settings) -> str | None:
    if s.args.out_dir:
        out = Path(s.args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for path in s.args.specs:
            (out / (Path(path).stem + ".cot.txt")).write_text(_synth_one(path, s.profile), encoding="utf-8")
        return None
    if len(s.args.specs) != 1:
        raise _Usage("several spec files need --out-dir")
    return _synth_one(s.args.specs[0], s.profile)


def cmd_segment(s: Settings) -> str:
    qtimes = [float(x) for x in s.args.questions.split(",") if x.strip()] if s.args.questions else []
    duration = float(s.args.duration)
    pieces = segment_by_questions(duration, qtimes, float(s.max_segment), float(s.chunk))
    plan = plan_sampling(duration, s.frame_cap)
    rows: list[list[Any]] = [["start_s", "end_s", "frames"]]
    rows += [[a, b, math.floor((b - a) * plan.fps + 1e-9)] for a, b in pieces]
    rows.append(["fps", "max_frames", "total_frames"])
    rows.append([float(plan.fps), plan.max_frames if plan.max_frames is not None else "", plan.n_frames(duration)])
    return _csv_text(rows)


# --- wiring -------------------------------------------------------------------


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamwatch", description="Streaming video-LLM mechanics toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values (flags take precedence)")
    common.add_argument("-o", "--output", help="write output here instead of standard output")
    common.add_argument("--seed", type=int)
    sub = p.add_subparsers(dest="command", required=True)

    def engine_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--layers", type=int)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--head-dim", dest="head_dim", type=int)
        sp.add_argument("--vocab", type=int)
        sp.add_argument("--within", choices=["causal", "full"], help="attention inside received units")

    sp = sub.add_parser("mask", parents=[common], help="dump the token-level mask bitmap")
    sp.add_argument("spec")
    sp.add_argument("--within", choices=["causal", "full"])

    sp = sub.add_parser("offsets", parents=[common], help="dump input/output base offsets as CSV")
    sp.add_argument("spec")

    sp = sub.add_parser("run", parents=[common], help="run the toy engine and print logit digests")
    sp.add_argument("spec")
    engine_flags(sp)
    sp.add_argument("--gen-len", dest="gen_len", type=int, help="generated length per unit if the spec has none")
    sp.add_argument("--decode", choices=["teacher", "greedy"])

    sp = sub.add_parser("pipeline", parents=[common], help="schedule a stream and report TTFT")
    sp.add_argument("spec")
    engine_flags(sp)
    sp.add_argument("--mode", choices=[m.value for m in PipelineMode])
    sp.add_argument("--note-len", dest="note_len", type=int)
    sp.add_argument("--answer-len", dest="answer_len", type=int)
    sp.add_argument("--concurrent", action="store_true", help="use two real writer threads (no event log)")

    sp = sub.add_parser("simulate", parents=[common], help="simulate ingestion backlog under decoding")
    sp.add_argument("--lambda", dest="lambda_", type=float, help="arrival rate (segments/s)")
    sp.add_argument("--mu", type=float, help="processing rate (segments/s)")
    sp.add_argument("--t-dec", dest="t_dec", type=float, help="decode window length (s)")
    sp.add_argument("--mode", choices=[m.value for m in LatencyMode])
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--sample-dt", dest="sample_dt", type=float)
    sp.add_argument("--decode-period", dest="decode_period", type=float)
    sp.add_argument("--overhead", type=float, help="residual pause per window in decoupled mode (s)")
    sp.add_argument("--arrivals", choices=["deterministic", "poisson"])

    sp = sub.add_parser("validate-cot", parents=[common], help="validate CoT documents")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--profile", choices=[x.value for x in cot.Profile])

    sp = sub.add_parser("synth-cot", parents=[common], help="emit skeleton CoT documents")
    sp.add_argument("specs", nargs="+")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--profile", choices=[x.value for x in cot.Profile])

    sp = sub.add_parser("segment", parents=[common], help="segment a video timeline by question times")
    sp.add_argument("--duration", type=float, required=True)
    sp.add_argument("--questions", help="comma-separated question times (s)")
    sp.add_argument("--max-segment", dest="max_segment", type=float)
    sp.add_argument("--chunk", type=float)
    sp.add_argument("--frame-cap", dest="frame_cap", type=int)
    return p


COMMANDS: dict[str, Callable[[Settings], Any]] = {
    "mask": cmd_mask,
    "offsets": cmd_offsets,
    "run": cmd_run,
    "pipeline": cmd_pipeline,
    "simulate": cmd_simulate,
    "validate-cot": cmd_validate_cot,
    "synth-cot": cmd_synth_cot,
    "segment": cmd_segment,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = Settings(args, _load_config(args.config))
        result = COMMANDS[args.command](settings)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"streamwatch: error: {exc}", file=sys.stderr)
        return 2
    except StreamwatchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    code = 0
    if isinstance(result, tuple):
        result, code = result
    if result is not None:
        if args.output:
            Path(args.output).write_text(result, encoding="utf-8")
        else:
            sys.stdout.write(result)
    return code


if __name__ == "__main__":
    sys.exit(main())
