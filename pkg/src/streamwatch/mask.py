"""Segment-level streaming causal mask and its token-level expansion.

Concatenated token order is ``R_1 .. R_U`` followed by ``C_1 .. C_U``; within a
segment unit, tokens are laid out row-major over the (t, h, w) grid.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import MissingGeneratedLengths, UnsupportedShape
from .stream import UnitStream

RECEIVED = "R"
GENERATED = "C"


class WithinUnit(enum.Enum):
    """Attention rule among the tokens of one received unit."""

    CAUSAL = "causal"
    FULL = "full"

    @classmethod
    def coerce(cls, value: "WithinUnit | str") -> "WithinUnit":
        return value if isinstance(value, cls) else cls(str(value).lower())


class BackendClass(enum.Enum):
    DENSE_CAUSAL_PREFILL = "DenseCausalPrefill"
    SINGLE_TOKEN_DECODE = "SingleTokenDecode"
    MASKED_CHUNK = "MaskedChunk"


@dataclass(frozen=True)
class SegMask:
    """Unit-level admissibility over ``R_1..R_U, C_1..C_U``.

    ``table[a, b]`` says whether unit ``a`` (query) may attend unit ``b`` (key),
    indexing received units at ``u - 1`` and generated units at ``U + u - 1``.
    """

    n_units: int
    table: np.ndarray

    def admits(self, query_side: str, u: int, key_side: str, v: int) -> bool:
        return bool(self.table[self._slot(query_side, u), self._slot(key_side, v)])

    def _slot(self, side: str, u: int) -> int:
        if not 1 <= u <= self.n_units:
            raise IndexError(f"unit index {u} outside 1..{self.n_units}")
        return u - 1 if side == RECEIVED else self.n_units + u - 1

    def admissible_keys(self, query_side: str, u: int) -> list[tuple[str, int]]:
        row = self.table[self._slot(query_side, u)]
        U = self.n_units
        return [(RECEIVED, i + 1) for i in range(U) if row[i]] + [
            (GENERATED, i + 1) for i in range(U) if row[U + i]
        ]


def build_seg_mask(stream: UnitStream) -> SegMask:
    U = stream.n_units
    lower = np.tril(np.ones((U, U), dtype=bool))
    table = np.zeros((2 * U, 2 * U), dtype=bool)
    table[:U, :U] = lower  # R_u -> R_v, v <= u
    table[U:, :U] = lower  # C_u -> R_v, v <= u
    table[U:, U:] = lower  # C_u -> C_k, k <= u
    table.setflags(write=False)
    return SegMask(U, table)


class Provenance(NamedTuple):
    side: str
    unit: int
    offset: int


def token_provenance(stream: UnitStream, generated_lens: Sequence[int]) -> list[Provenance]:
    prov = [Provenance(RECEIVED, r.arrival_index, j) for r in stream.received for j in range(r.n_tokens)]
    for u, n in enumerate(generated_lens, start=1):
        prov.extend(Provenance(GENERATED, u, j) for j in range(n))
    return prov


class TokenMask:
    """Token-level mask, available densely, row-by-unit, or as a predicate.

    Rows are materialized lazily; ``allowed`` builds the full table on first use.
    """

    def __init__(self, seg: SegMask, provenance: Sequence[Provenance], within_received: WithinUnit):
        self.seg = seg
        self.provenance = tuple(provenance)
        self.within_received = within_received
        n = len(self.provenance)
        U = seg.n_units
        self._slot = np.fromiter(
            ((p.unit - 1) if p.side == RECEIVED else (U + p.unit - 1) for p in self.provenance),
            dtype=np.int64,
            count=n,
        )
        self._offset = np.fromiter((p.offset for p in self.provenance), dtype=np.int64, count=n)
        self._unit_rows: dict[tuple[str, int], np.ndarray] = {}

    @property
    def q_len(self) -> int:
        return len(self.provenance)

    @property
    def k_len(self) -> int:
        return len(self.provenance)

    def _rows(self, idx: np.ndarray) -> np.ndarray:
        qs = self._slot[idx][:, None]
        ks = self._slot[None, :]
        allowed = self.seg.table[qs, ks]
        same = qs == ks
        later = self._offset[None, :] > self._offset[idx][:, None]
        gen_query = qs >= self.seg.n_units
        if self.within_received is WithinUnit.CAUSAL:
            blocked = same & later
        else:
            blocked = same & later & gen_query
        return allowed & ~blocked

    @cached_property
    def allowed(self) -> np.ndarray:
        out = self._rows(np.arange(self.q_len))
        out.setflags(write=False)
        return out

    def unit_rows(self, side: str, u: int) -> np.ndarray:
        """Rows for the query tokens of one unit, computed on demand."""
        key = (side, u)
        if key not in self._unit_rows:
            target = self.seg._slot(side, u)
            idx = np.flatnonzero(self._slot == target)
            rows = self._rows(idx)
            rows.setflags(write=False)
            self._unit_rows[key] = rows
        return self._unit_rows[key]

    def unit_indices(self, side: str, u: int) -> np.ndarray:
        return np.flatnonzero(self._slot == self.seg._slot(side, u))

    def allows(self, i: int, j: int) -> bool:
        qi, kj = self.provenance[i], self.provenance[j]
        if not self.seg.admits(qi.side, qi.unit, kj.side, kj.unit):
            return False
        if (qi.side, qi.unit) != (kj.side, kj.unit):
            return True
        if qi.side == GENERATED or self.within_received is WithinUnit.CAUSAL:
            return kj.offset <= qi.offset
        return True

    def to_bitmap(self) -> list[str]:
        return ["".join("1" if x else "0" for x in row) for row in self.allowed]


def expand_token_mask(
    mask: SegMask,
    stream: UnitStream,
    within_received: WithinUnit | str = WithinUnit.CAUSAL,
    generated_lens: Sequence[int] | None = None,
    require_complete: bool = False,
) -> TokenMask:
    """Expand a unit-level mask to tokens.

    Generated lengths default to the stream's generated units, which may be a
    prefix; ``require_complete`` demands one length per received unit.
    """
    within = WithinUnit.coerce(within_received)
    lens = list(stream.generated_lens() if generated_lens is None else generated_lens)
    if len(lens) > stream.n_units:
        raise MissingGeneratedLengths(f"{len(lens)} generated lengths for {stream.n_units} units")
    if any(n < 0 for n in lens):
        raise MissingGeneratedLengths("generated lengths must be non-negative")
    if require_complete and len(lens) < stream.n_units:
        raise MissingGeneratedLengths(
            f"generated lengths known for {len(lens)} of {stream.n_units} units"
        )
    if mask.n_units != stream.n_units:
        raise MissingGeneratedLengths("mask and stream disagree on unit count")
    return TokenMask(mask, token_provenance(stream, lens), within)


def classify_attention(q_len: int, k_len: int, mask_is_dense_causal: bool) -> BackendClass:
    """Pick the attention backend for one call.

    Single-token queries decode; square dense-causal calls prefill; anything
    else needs the explicit streaming mask.
    """
    if q_len < 1 or k_len < 1:
        raise UnsupportedShape(f"empty attention call ({q_len}, {k_len})")
    if q_len > k_len:
        raise UnsupportedShape(f"q_len {q_len} exceeds k_len {k_len}")
    if q_len == 1:
        return BackendClass.SINGLE_TOKEN_DECODE
    if q_len == k_len and mask_is_dense_causal:
        return BackendClass.DENSE_CAUSAL_PREFILL
    return BackendClass.MASKED_CHUNK


def is_dense_causal(allowed: np.ndarray) -> bool:
    """True when a (q, k) mask is the bottom-right-aligned causal pattern."""
    q, k = allowed.shape
    ref = np.tril(np.ones((q, k), dtype=bool), k=k - q)
    return bool(np.array_equal(allowed, ref))
