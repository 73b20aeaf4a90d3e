"""Decoupled input/output positional offsets and multi-axis rotary encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidRopeConfig, LengthMismatch
from .stream import ReceivedUnit, UnitStream, unit_span


class TokenPosition(NamedTuple):
    p_t: int
    p_h: int
    p_w: int


@dataclass(frozen=True)
class OffsetTable:
    """Base offsets; indices are 0-based lists of per-kind entries."""

    seg_offsets: tuple[int, ...]
    question_offsets: tuple[int, ...]
    gen_offsets: tuple[int, ...]
    input_budget: int
    unit_offsets: tuple[int, ...]  # per received unit, arrival order
    spans: tuple[int, ...]
    gen_lens: tuple[int, ...]

    @property
    def next_gen_offset(self) -> int:
        """Base offset the next (not yet generated) unit would receive."""
        return sum(self.gen_lens)


def compute_offsets(stream: UnitStream, generated_lens: Sequence[int] | None = None) -> OffsetTable:
    """Input offsets accumulate received spans; output offsets restart at 0."""
    lens = tuple(stream.generated_lens() if generated_lens is None else (int(n) for n in generated_lens))
    if len(lens) > stream.n_units:
        raise LengthMismatch(f"{len(lens)} generated lengths for {stream.n_units} received units")
    if any(n < 0 for n in lens):
        raise LengthMismatch("generated lengths must be non-negative")

    spans = tuple(unit_span(r) for r in stream.received)
    unit_offsets = []
    acc = 0
    for span in spans:
        unit_offsets.append(acc)
        acc += span
    seg = tuple(b for b, r in zip(unit_offsets, stream.received) if r.is_segment)
    qst = tuple(b for b, r in zip(unit_offsets, stream.received) if not r.is_segment)

    gen = []
    acc_out = 0
    for n in lens:
        gen.append(acc_out)
        acc_out += n
    return OffsetTable(seg, qst, tuple(gen), acc, tuple(unit_offsets), spans, lens)


def received_positions(unit: ReceivedUnit, base: int) -> np.ndarray:
    """(n_tokens, 3) integer coordinates for a received unit starting at ``base``."""
    if unit.is_segment:
        g = unit.grid
        t, h, w = np.meshgrid(np.arange(g.t_len), np.arange(g.h_len), np.arange(g.w_len), indexing="ij")
        local = np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)
        return local.astype(np.int64) + base
    return text_positions(unit.n_tokens, base)


def text_positions(length: int, base: int) -> np.ndarray:
    n = np.arange(length, dtype=np.int64) + base
    return np.repeat(n[:, None], 3, axis=1)


@dataclass(frozen=True)
class StreamPositions:
    received: tuple[np.ndarray, ...]
    generated: tuple[np.ndarray, ...]

    def received_flat(self) -> np.ndarray:
        return np.concatenate(self.received, axis=0) if self.received else np.zeros((0, 3), np.int64)

    def generated_flat(self) -> np.ndarray:
        return np.concatenate(self.generated, axis=0) if self.generated else np.zeros((0, 3), np.int64)

    def all_flat(self) -> np.ndarray:
        return np.concatenate([self.received_flat(), self.generated_flat()], axis=0)

    def as_token_positions(self) -> tuple[list[TokenPosition], list[TokenPosition]]:
        def conv(a: np.ndarray) -> list[TokenPosition]:
            return [TokenPosition(*map(int, row)) for row in a]

        return conv(self.received_flat()), conv(self.generated_flat())


def assign_positions(stream: UnitStream, offsets: OffsetTable) -> StreamPositions:
    if len(offsets.unit_offsets) != stream.n_units:
        raise LengthMismatch("offset table was built for a different stream")
    rec = tuple(received_positions(r, b) for r, b in zip(stream.received, offsets.unit_offsets))
    gen = tuple(text_positions(n, b) for n, b in zip(offsets.gen_lens, offsets.gen_offsets))
    return StreamPositions(rec, gen)


# --- rotary encoding ---------------------------------------------------------


def default_axis_bands(head_dim: int) -> tuple[int, int, int]:
    """Split rotary pairs across (t, h, w) as evenly as possible, t first."""
    pairs = head_dim // 2
    base, rem = divmod(pairs, 3)
    return tuple(2 * (base + (1 if i < rem else 0)) for i in range(3))


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_bands: tuple[int, int, int] | None = None
    base_theta: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2:
            raise InvalidRopeConfig(f"head_dim must be a positive even integer, got {self.head_dim}")
        bands = self.axis_bands if self.axis_bands is not None else default_axis_bands(self.head_dim)
        bands = tuple(int(b) for b in bands)
        if len(bands) != 3 or any(b < 0 or b % 2 for b in bands) or sum(bands) != self.head_dim:
            raise InvalidRopeConfig(f"axis bands {bands} must be 3 even non-negative sizes summing to {self.head_dim}")
        if not self.base_theta > 0:
            raise InvalidRopeConfig("base_theta must be positive")
        object.__setattr__(self, "axis_bands", bands)

    def frequencies(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pair inverse frequencies and the axis each pair reads."""
        freqs, axes = [], []
        for axis, band in enumerate(self.axis_bands):
            i = np.arange(band // 2, dtype=np.float64)
            freqs.append(self.base_theta ** (-2.0 * i / band) if band else i)
            axes.append(np.full(band // 2, axis, dtype=np.int64))
        return np.concatenate(freqs), np.concatenate(axes)


def rope_rotate(x: np.ndarray, positions: np.ndarray, config: RopeConfig) -> np.ndarray:
    """Rotate ``x[..., n, head_dim]`` by per-token positions ``(n, 3)``."""
    if x.shape[-1] != config.head_dim:
        raise DimensionMismatch(f"last axis {x.shape[-1]} != head_dim {config.head_dim}")
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] != x.shape[-2]:
        raise DimensionMismatch(f"positions shape {positions.shape} does not match {x.shape}")
    freqs, axes = config.frequencies()
    angles = positions[:, axes].astype(np.float64) * freqs  # (n, head_dim/2)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(q_or_k: Sequence[float], position: Sequence[int], config: RopeConfig) -> np.ndarray:
    v = np.asarray(q_or_k, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != config.head_dim:
        raise DimensionMismatch(f"vector of length {v.shape} for head_dim {config.head_dim}")
    if len(position) != 3:
        raise DimensionMismatch("position needs (p_t, p_h, p_w)")
    return rope_rotate(v[None, :], np.asarray([position], dtype=np.int64), config)[0]
