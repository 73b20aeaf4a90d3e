"""End-to-end acceptance checks. Each test maps to one numbered criterion;
the terminal summary prints one PASS/FAIL line per criterion."""

from __future__ import annotations

import dataclasses
import math
import subprocess
import sys
import time

import numpy as np

from helpers import example_stream, random_descs, random_lens, random_stream
from streamwatch import cot
from streamwatch.engine import EngineConfig, forward_monolithic, forward_streaming, init_engine
from streamwatch.latency import LatencyMode, RateConfig, catch_up_closed_form, required_horizon, simulate
from streamwatch.mask import build_seg_mask, expand_token_mask
from streamwatch.pipeline import PipelineMode, run_pipeline, ttft_summary
from streamwatch.rope import compute_offsets
from streamwatch.stream import (
    QuestionDesc,
    SegmentDesc,
    build_stream,
    plan_sampling,
    segment_by_questions,
    unit_span,
)


# --- 1 ----------------------------------------------------------------------


def oracle_mask(kinds_and_lens, gen_lens, full_within_received=False):
    """Token pairs admitted by the segment-level rule, enumerated directly.

    R_u sees R_v (v <= u); C_u sees R_v (v <= u) and C_k (k <= u); R never
    sees C. Inside one unit the order is causal, except optionally inside R.
    """
    toks = []
    for u, n in enumerate(kinds_and_lens, start=1):
        toks += [("R", u, j) for j in range(n)]
    for u, n in enumerate(gen_lens, start=1):
        toks += [("C", u, j) for j in range(n)]
    out = np.zeros((len(toks), len(toks)), dtype=bool)
    for i, (qs, qu, qj) in enumerate(toks):
        for k, (ks, ku, kj) in enumerate(toks):
            if qs == "R" and ks == "C":
                ok = False
            elif ku > qu:
                ok = False
            elif ku < qu:
                ok = True
            elif qs != ks:
                ok = True  # C_u reading R_u
            elif qs == "R" and full_within_received:
                ok = True
            else:
                ok = kj <= qj
            out[i, k] = ok
    return out


def test_criterion_01_mask_oracle_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mismatches = 0
    for trial in range(1000):
        stream = random_stream(rng, max_units=12, max_len=6)
        full = trial % 2 == 1
        n_gen = int(rng.integers(0, stream.n_units + 1)) if trial % 3 == 0 else stream.n_units
        lens = random_lens(rng, n_gen, 0, 6)
        tm = expand_token_mask(build_seg_mask(stream), stream, "full" if full else "causal", lens)
        ref = oracle_mask([r.n_tokens for r in stream.received], lens, full)
        mismatches += int((tm.allowed != ref).sum())
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: {mismatches} mismatches over 1000 streams in {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed <= 60


# --- 2 ----------------------------------------------------------------------


def test_criterion_02_example_admissible_sets():
    stream = example_stream()
    seg = build_seg_mask(stream)
    expected = {
        1: {("R", 1), ("C", 1)},
        2: {("R", 1), ("R", 2), ("C", 1), ("C", 2)},
        3: {("R", 1), ("R", 2), ("R", 3), ("C", 1), ("C", 2), ("C", 3)},
    }
    for u, keys in expected.items():
        assert set(seg.admissible_keys("C", u)) == keys
    # C_1 reads no question token and nothing from S_2 onward
    lens = [1, 2, 1, 2, 1, 1, 2]
    tm = expand_token_mask(seg, stream, "causal", lens)
    rows = tm.allowed[tm.unit_indices("C", 1)]
    seen = {(tm.provenance[j].side, tm.provenance[j].unit) for j in np.flatnonzero(rows.any(axis=0))}
    assert seen == {("R", 1), ("C", 1)}


# --- 3 ----------------------------------------------------------------------


def _respan(rng, descs):
    """Same kind sequence, fresh received-unit sizes."""
    out = []
    for d in descs:
        if isinstance(d, SegmentDesc):
            out.append(SegmentDesc(tuple(int(x) for x in rng.integers(1, 5, size=3))))
        else:
            out.append(QuestionDesc(int(rng.integers(1, 9))))
    return out


def test_criterion_03_offset_decoupling():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        descs = random_descs(rng)
        stream = build_stream(descs)
        U = stream.n_units
        a = compute_offsets(stream, random_lens(rng, U, 0, 9))
        b = compute_offsets(stream, random_lens(rng, U, 0, 9))
        assert a.seg_offsets == b.seg_offsets
        assert a.question_offsets == b.question_offsets

        lens = random_lens(rng, U, 0, 9)
        other = build_stream(_respan(rng, descs))
        c = compute_offsets(stream, lens)
        d = compute_offsets(other, lens)
        assert c.gen_offsets == d.gen_offsets
        assert c.gen_offsets == tuple(int(x) for x in np.concatenate([[0], np.cumsum(lens)[:-1]]))

        spans = [unit_span(r) for r in stream.received]
        expect = [sum(spans[:i]) for i in range(U)]
        assert list(c.unit_offsets) == expect


# --- 4 ----------------------------------------------------------------------


def _random_engine(rng) -> EngineConfig:
    while True:
        heads = int(rng.integers(1, 5))
        head_dim = 2 * int(rng.integers(1, 9))
        if heads * head_dim <= 64:
            break
    return EngineConfig(
        n_layers=int(rng.integers(1, 4)),
        n_heads=heads,
        head_dim=head_dim,
        vocab_size=int(rng.integers(8, 40)),
        seed=int(rng.integers(0, 10_000)),
    )


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def test_criterion_04_dual_cache_equivalence():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(200):
        cfg = _random_engine(rng)
        engine = init_engine(cfg)
        stream = random_stream(rng, max_units=8, max_len=6, vocab=cfg.vocab_size)
        gen = [list(rng.integers(0, cfg.vocab_size, size=n)) for n in random_lens(rng, stream.n_units, 0, 4)]
        within = "full" if trial % 2 else "causal"
        mono = forward_monolithic(engine, stream, gen, within)
        stre = forward_streaming(engine, stream, gen, within)
        for r, out in zip(stream.received, stre.received):
            worst = max(worst, _rel_err(out.logits, mono.logits[mono.rows("R", r.arrival_index)]))
        for res in stre.generated:
            if res.logits.size:
                worst = max(worst, _rel_err(res.logits, mono.logits[mono.rows("C", res.unit)]))
    elapsed = time.perf_counter() - t0
    print(f"criterion 4: worst relative error {worst:.3g} in {elapsed:.1f}s")
    assert worst <= 1e-5
    assert elapsed <= 300


# --- 5 ----------------------------------------------------------------------


def test_criterion_05_anti_leakage_perturbation():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(60):
        cfg = _random_engine(rng)
        engine = init_engine(cfg)
        descs = random_descs(rng, max_units=8, max_len=6, vocab=cfg.vocab_size)
        if len(descs) < 2:
            continue
        stream = build_stream(descs)
        gen = [list(rng.integers(0, cfg.vocab_size, size=n)) for n in random_lens(rng, stream.n_units, 1, 3)]
        v = int(rng.integers(2, stream.n_units + 1))

        # same-shape perturbation: new token ids for received unit v
        changed = list(descs)
        d = descs[v - 1]
        n = stream.unit(v).n_tokens
        new = tuple(int((t + 1 + rng.integers(0, cfg.vocab_size - 1)) % cfg.vocab_size) for t in stream.unit(v).tokens)
        changed[v - 1] = dataclasses.replace(d, tokens=new)
        alt = build_stream(changed)

        base_m = forward_monolithic(engine, stream, gen)
        alt_m = forward_monolithic(engine, alt, gen)
        base_s = forward_streaming(engine, stream, gen)
        alt_s = forward_streaming(engine, alt, gen)
        for u in range(1, v):
            assert np.array_equal(base_m.logits[base_m.rows("C", u)], alt_m.logits[alt_m.rows("C", u)])
            assert np.array_equal(base_m.logits[base_m.rows("R", u)], alt_m.logits[alt_m.rows("R", u)])
            assert np.array_equal(base_s.generated[u - 1].logits, alt_s.generated[u - 1].logits)
            checked += 1

        # size perturbation: unit v gets a different span / token count
        resized = list(descs)
        if isinstance(d, SegmentDesc):
            g = d.grid
            resized[v - 1] = SegmentDesc((g[0] + 1, g[1], g[2]))
        else:
            resized[v - 1] = QuestionDesc(n + 2)
        big = build_stream(resized)
        big_s = forward_streaming(engine, big, gen)
        for u in range(1, v):
            assert np.array_equal(base_s.generated[u - 1].logits, big_s.generated[u - 1].logits)
            checked += 1
    print(f"criterion 5: {checked} earlier-unit comparisons, all exactly equal")
    assert checked > 0


# --- 6 ----------------------------------------------------------------------


def test_criterion_06_backlog_catch_up():
    t0 = time.perf_counter()
    worst = 0.0
    for t_dec in (1.0, 5.0, 10.0):
        lam = 1000.0 / t_dec
        for k in range(1, 10):
            rho = k / 10
            cfg = RateConfig(lambda_=lam, mu=lam / rho, t_dec=t_dec)
            horizon = required_horizon(cfg) * 1.05
            inter = simulate(cfg, LatencyMode.INTERLEAVED, horizon, sample_dt=t_dec)
            closed = catch_up_closed_form(cfg)
            rel = abs(inter.catch_up_s - closed) / closed
            worst = max(worst, rel)
            assert rel <= 0.01, (rho, t_dec, inter.catch_up_s, closed)
            dec = simulate(cfg, LatencyMode.DECOUPLED, horizon, sample_dt=t_dec)
            assert dec.catch_up_s <= 1.0 / lam

    cfg = RateConfig(lambda_=20.0, mu=20.0 / 1.05, t_dec=5.0)
    trace = simulate(cfg, LatencyMode.INTERLEAVED, 400.0, sample_dt=1.0)
    pre = [c.pre_backlog for c in trace.cycles]
    assert len(pre) >= 4
    assert all(b > a for a, b in zip(pre, pre[1:])), pre
    assert math.isinf(catch_up_closed_form(cfg))
    elapsed = time.perf_counter() - t0
    print(f"criterion 6: worst relative error {worst:.4%} in {elapsed:.1f}s; rho=1.05 pre-backlogs {pre[:5]}")
    assert elapsed <= 30


# --- 7 ----------------------------------------------------------------------


def _ttft_by_mode(stream, note_len, answer_lens, arrivals=None):
    return {
        mode: ttft_summary(run_pipeline(None, stream, mode, note_len, answer_lens, arrivals=arrivals).events)[0]
        for mode in PipelineMode
    }


def test_criterion_07_ttft_ordering():
    rng = np.random.default_rng(7)
    n_workloads = 0
    for trial in range(150):
        stream = random_stream(rng, max_units=10, max_len=8)
        if stream.n_questions == 0:
            continue
        note_len = int(rng.integers(0, 6))
        answer_lens = random_lens(rng, stream.n_questions, 1, 6)
        arrivals = None
        if trial % 2:
            arrivals = list(np.cumsum(rng.integers(0, 10, size=stream.n_units)))
        t = _ttft_by_mode(stream, note_len, answer_lens, arrivals)
        for d, i, b in zip(t[PipelineMode.DECOUPLED], t[PipelineMode.INTERLEAVED], t[PipelineMode.BATCH]):
            assert d <= i <= b, (d, i, b)
        n_workloads += 1
    assert n_workloads >= 100

    # overlapping work: notes for earlier segments delay ingestion only when interleaved
    stream = build_stream([SegmentDesc((4, 1, 1)), SegmentDesc((4, 1, 1)), QuestionDesc(2)])
    t = _ttft_by_mode(stream, note_len=5, answer_lens=[3])
    d, i, b = t[PipelineMode.DECOUPLED][0], t[PipelineMode.INTERLEAVED][0], t[PipelineMode.BATCH][0]
    print(f"criterion 7: {n_workloads} workloads ordered; constructed TTFT D={d} I={i} B={b}")
    assert d < i <= b


# --- 8 ----------------------------------------------------------------------


SEGMENTATION_TABLE = [
    (50, [50], [(0, 50)]),
    (130, [40, 130], [(0, 40), (40, 70), (70, 100), (100, 130)]),
    (60, [60], [(0, 60)]),
    (61, [61], [(0, 30), (30, 60), (60, 61)]),
    (200, [10, 100], [(0, 10), (10, 40), (40, 70), (70, 100), (100, 130), (130, 160), (160, 190), (190, 200)]),
    (90, [30], [(0, 30), (30, 90)]),
    (95, [5], [(0, 5), (5, 35), (35, 65), (65, 95)]),
    (120, [], [(0, 30), (30, 60), (60, 90), (90, 120)]),
    (45, [20], [(0, 20), (20, 45)]),
]

SAMPLING_TABLE = [
    (200, None, 1.0, None, 200),
    (299.9, None, 1.0, None, 299),
    (300, None, 0.5, None, 150),
    (450, None, 0.5, None, 225),
    (599, None, 0.5, None, 299),
    (600, None, 0.2, None, 120),
    (1200, 64, 0.2, 64, 64),
    (200, 64, 1.0, 64, 64),
    (50, 64, 1.0, 64, 50),
]


def test_criterion_08_segmentation_and_sampling_fixtures():
    for duration, qtimes, expected in SEGMENTATION_TABLE:
        assert segment_by_questions(duration, qtimes, 60, 30) == [(float(a), float(b)) for a, b in expected]
    for duration, cap, fps, max_frames, n_frames in SAMPLING_TABLE:
        plan = plan_sampling(duration, cap)
        assert float(plan.fps) == fps
        assert plan.max_frames == max_frames
        assert plan.n_frames(duration) == n_frames


# --- 9 ----------------------------------------------------------------------

WORDS = ["amber", "kettle", "violin", "harbor", "seven", "lantern", "orchid", "maple", "copper", "falcon"]


def make_corpus(n: int, seed: int = 9) -> list[tuple[str, list[str]]]:
    rng = np.random.default_rng(seed)
    docs = []
    while len(docs) < n:
        stream = random_stream(rng, max_units=10, max_len=4)
        if stream.n_questions == 0:
            continue
        answers = [" ".join(rng.choice(WORDS, size=int(rng.integers(1, 3)), replace=False)) for _ in range(stream.n_questions)]
        docs.append((cot.synthesize_skeleton(stream, answers), answers))
    return docs


def mut_drop(doc, rng):
    i = int(rng.integers(len(doc.output_chunks)))
    return dataclasses.replace(doc, output_chunks=doc.output_chunks[:i] + doc.output_chunks[i + 1 :]), "A"


def mut_duplicate(doc, rng):
    i = int(rng.integers(len(doc.output_chunks)))
    ch = doc.output_chunks
    return dataclasses.replace(doc, output_chunks=ch[: i + 1] + ch[i:]), "A"


def mut_swap(doc, rng):
    ch = list(doc.output_chunks)
    i = int(rng.integers(len(ch) - 1))
    ch[i], ch[i + 1] = ch[i + 1], ch[i]
    return dataclasses.replace(doc, output_chunks=tuple(ch)), "A"


def mut_future_ref(doc, rng):
    ch = list(doc.output_chunks)
    i = int(rng.integers(len(ch)))
    seen = sum(isinstance(u, cot.SegmentInput) for u in doc.input_units[: i + 1])
    note = f" This anticipates SEG {seen + 1}."
    if isinstance(ch[i], cot.SegmentChunk):
        ch[i] = dataclasses.replace(ch[i], evidence=ch[i].evidence + note)
    else:
        ch[i] = dataclasses.replace(ch[i], reasoning=ch[i].reasoning + note)
    return dataclasses.replace(doc, output_chunks=tuple(ch)), "C"


def mut_leak(doc, rng):
    ch = list(doc.output_chunks)
    refs = {u.index: u.reference_answer for u in doc.input_units if isinstance(u, cot.QuestionInput)}
    i = int(rng.integers(len(ch)))
    if isinstance(ch[i], cot.SegmentChunk):
        j = int(rng.choice(sorted(refs)))
        ch[i] = dataclasses.replace(ch[i], state_update=ch[i].state_update + f" It is {refs[j]}.")
    else:
        ch[i] = dataclasses.replace(ch[i], reasoning=ch[i].reasoning + f" So: {refs[ch[i].index]}.")
    return dataclasses.replace(doc, output_chunks=tuple(ch)), "D"


def mut_answer(doc, rng):
    ch = list(doc.output_chunks)
    qa = [i for i, c in enumerate(ch) if isinstance(c, cot.QaChunk)]
    i = int(rng.choice(qa))
    ch[i] = dataclasses.replace(ch[i], answer=ch[i].answer + " indeed")
    return dataclasses.replace(doc, output_chunks=tuple(ch)), "D"


MUTATIONS = [mut_drop, mut_duplicate, mut_swap, mut_future_ref, mut_leak, mut_answer]


def test_criterion_09_cot_mutation_suite():
    corpus = make_corpus(120)
    rng = np.random.default_rng(99)
    for text, _ in corpus:
        report = cot.validate(cot.parse(text))
        assert report.passed, report.violations
    for op in MUTATIONS:
        rejected = 0
        for text, _ in corpus:
            doc = cot.parse(text)
            mutated, expect = op(doc, rng)
            report = cot.validate(cot.parse(cot.serialize(mutated)))
            assert expect in report.constraints(), (op.__name__, report.violations)
            rejected += 1
        assert rejected == len(corpus)
    print(f"criterion 9: {len(corpus)} valid documents, {len(MUTATIONS)} operators all rejected")


# --- 10 ---------------------------------------------------------------------


def test_criterion_10_cli_determinism(tmp_path, fixtures):
    spec = str(fixtures / "example_stream.json")
    cot_doc = tmp_path / "doc.txt"
    cot_doc.write_text(make_corpus(1)[0][0], encoding="utf-8")
    bad = tmp_path / "bad.txt"
    bad.write_text(cot_doc.read_text().replace("<EOT>", "", 1), encoding="utf-8")
    invocations = {
        "mask": ["mask", spec],
        "offsets": ["offsets", spec],
        "run": ["run", spec, "--seed", "3", "--decode", "greedy"],
        "pipeline": ["pipeline", spec, "--mode", "decoupled", "--seed", "2"],
        "pipeline-concurrent": ["pipeline", spec, "--concurrent", "--seed", "2"],
        "simulate": ["simulate", "--lambda", "1", "--mu", "2", "--t-dec", "10", "--mode", "interleaved"],
        "simulate-poisson": ["simulate", "--lambda", "2", "--mu", "4", "--t-dec", "5", "--arrivals", "poisson", "--seed", "5"],
        "validate-cot": ["validate-cot", str(cot_doc), str(bad)],
        "synth-cot": ["synth-cot", spec],
        "segment": ["segment", "--duration", "130", "--questions", "40,130"],
    }
    for name, argv in invocations.items():
        outs = []
        for rep in range(2):
            out = tmp_path / f"{name}.{rep}.out"
            proc = subprocess.run(
                [sys.executable, "-m", "streamwatch", *argv, "-o", str(out)], capture_output=True, text=True
            )
            assert proc.returncode == (1 if name == "validate-cot" else 0), (name, proc.stderr)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1], name
        assert outs[0], name
