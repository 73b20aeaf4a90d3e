"""Random stream generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from streamwatch.stream import QuestionDesc, SegmentDesc, UnitStream, build_stream


def random_grid(rng: np.random.Generator, max_tokens: int) -> tuple[int, int, int]:
    while True:
        g = tuple(int(x) for x in rng.integers(1, 4, size=3))
        if g[0] * g[1] * g[2] <= max_tokens:
            return g


def random_descs(rng: np.random.Generator, max_units: int = 12, max_len: int = 6, vocab: int | None = None):
    n = int(rng.integers(1, max_units + 1))
    descs = []
    for u in range(n):
        if u == 0 or rng.random() < 0.6:
            g = random_grid(rng, max_len)
            toks = None
            if vocab is not None:
                toks = tuple(int(x) for x in rng.integers(0, vocab, size=g[0] * g[1] * g[2]))
            descs.append(SegmentDesc(g, tokens=toks))
        else:
            length = int(rng.integers(1, max_len + 1))
            toks = tuple(int(x) for x in rng.integers(0, vocab, size=length)) if vocab is not None else None
            descs.append(QuestionDesc(length, tokens=toks))
    return descs


def random_stream(rng: np.random.Generator, max_units: int = 12, max_len: int = 6, vocab: int | None = None) -> UnitStream:
    return build_stream(random_descs(rng, max_units, max_len, vocab))


def random_lens(rng: np.random.Generator, n: int, lo: int = 0, hi: int = 6) -> list[int]:
    return [int(x) for x in rng.integers(lo, hi + 1, size=n)]


def example_stream() -> UnitStream:
    """The running example <S1, Q1, S2, Q2, S3, S4, Q3>."""
    return build_stream(
        [
            SegmentDesc((2, 1, 1)),
            QuestionDesc(2),
            SegmentDesc((1, 1, 2)),
            QuestionDesc(1),
            SegmentDesc((1, 1, 1)),
            SegmentDesc((1, 2, 1)),
            QuestionDesc(2),
        ]
    )
