"""Seeded toy decoder that runs under the streaming mask and positions.

Two execution paths share one set of weights:

* :func:`forward_monolithic` runs the whole ``<R_1..R_U, C_1..C_U>`` sequence
  in one pass with the expanded token mask. It is the reference.
* :func:`ingest_unit` / :func:`decode_unit` grow a :class:`DualKvCache`
  incrementally, one received unit or one generated token at a time.
"""

from __future__ import annotations

import collections
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EngineError,
    InvalidConfig,
    InvalidRopeConfig,
    LengthMismatch,
    OutOfOrderDecode,
    OutOfOrderIngest,
    SnapshotTooLong,
    SnapshotTooShort,
)
from .mask import (
    BackendClass,
    WithinUnit,
    build_seg_mask,
    classify_attention,
    expand_token_mask,
    is_dense_causal,
)
from .rope import (
    OffsetTable,
    RopeConfig,
    assign_positions,
    compute_offsets,
    received_positions,
    rope_rotate,
    text_positions,
)
from .stream import ReceivedUnit, UnitStream, unit_span

SEGMENT_TYPE, QUESTION_TYPE, GENERATED_TYPE = 0, 1, 2


@dataclass(frozen=True)
class EngineConfig:
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 64
    seed: int = 0
    rope: RopeConfig | None = None
    ffn_mult: int = 4
    start_token: int = 0

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "ffn_mult"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if self.head_dim % 2:
            raise InvalidConfig(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if not 0 <= self.start_token < self.vocab_size:
            raise InvalidConfig("start_token outside the vocabulary")
        try:
            rope = self.rope if self.rope is not None else RopeConfig(self.head_dim)
        except InvalidRopeConfig as exc:
            raise InvalidConfig(str(exc)) from exc
        if rope.head_dim != self.head_dim:
            raise InvalidConfig("rope.head_dim must equal head_dim")
        object.__setattr__(self, "rope", rope)

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Engine:
    """Immutable weights plus the shared per-layer math."""

    def __init__(self, config: EngineConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, V = config.model_dim, config.vocab_size
        hidden = config.ffn_mult * d
        self.embed = _frozen(rng.normal(0.0, 1.0, (V, d)))
        self.type_embed = _frozen(rng.normal(0.0, 0.5, (3, d)))
        layers = []
        for _ in range(config.n_layers):
            layers.append(
                LayerWeights(
                    *(
                        _frozen(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
                        for _ in range(4)
                    ),
                    _frozen(rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden))),
                    _frozen(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d))),
                )
            )
        self.layers = tuple(layers)
        self.unembed = _frozen(rng.normal(0.0, 1.0 / np.sqrt(d), (d, V)))

    # -- building blocks --

    def embed_tokens(self, tokens: Sequence[int], type_id: int) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64) % self.config.vocab_size
        return self.embed[ids] + self.type_embed[type_id]

    @staticmethod
    def _rms(h: np.ndarray) -> np.ndarray:
        return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-6)

    def qkv(self, layer: int, h: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rotated queries/keys and values, each shaped (n, heads, head_dim)."""
        w = self.layers[layer]
        x = self._rms(h)
        n = h.shape[0]
        H, hd = self.config.n_heads, self.config.head_dim
        q = (x @ w.wq).reshape(n, H, hd).transpose(1, 0, 2)
        k = (x @ w.wk).reshape(n, H, hd).transpose(1, 0, 2)
        v = (x @ w.wv).reshape(n, H, hd)
        q = rope_rotate(q, positions, self.config.rope).transpose(1, 0, 2)
        k = rope_rotate(k, positions, self.config.rope).transpose(1, 0, 2)
        return q, k, v

    def attend(
        self, q: np.ndarray, k: np.ndarray, v: np.ndarray, allowed: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Masked softmax attention; returns (output (nq, d), weights (H, nq, nk))."""
        if not allowed.any(axis=1).all():
            raise EngineError("attention row with no admissible key")
        scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(self.config.head_dim)
        scores = np.where(allowed[None, :, :], scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p = p / p.sum(axis=-1, keepdims=True)
        out = np.einsum("hqk,khd->qhd", p, v).reshape(q.shape[0], -1)
        return out, p

    def finish_block(self, layer: int, h: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
        w = self.layers[layer]
        h = h + attn_out @ w.wo
        x = self._rms(h)
        ff = x @ w.w1
        ff = 0.5 * ff * (1.0 + np.tanh(0.7978845608028654 * (ff + 0.044715 * ff**3)))
        return h + ff @ w.w2

    def logits(self, h: np.ndarray) -> np.ndarray:
        return self._rms(h) @ self.unembed


def init_engine(config: EngineConfig) -> Engine:
    return Engine(config)


@dataclass
class ForwardResult:
    hidden: np.ndarray  # (tokens, model_dim)
    logits: np.ndarray  # (tokens, vocab)
    n_received_tokens: int
    unit_slices: dict[tuple[str, int], slice]
    attention: list[np.ndarray] | None = None

    def rows(self, side: str, u: int) -> slice:
        return self.unit_slices[(side, u)]


def _type_of(unit: ReceivedUnit) -> int:
    return SEGMENT_TYPE if unit.is_segment else QUESTION_TYPE


def forward_monolithic(
    engine: Engine,
    stream: UnitStream,
    generated_tokens: Sequence[Sequence[int]] | None = None,
    within_received: WithinUnit | str = WithinUnit.CAUSAL,
    return_attention: bool = False,
) -> ForwardResult:
    """Single pass over the concatenated received and generated tokens.

    ``generated_tokens`` defaults to the stream's generated units and may be a
    prefix; received rows never depend on generated ones.
    """
    if generated_tokens is None:
        generated_tokens = [g.tokens for g in stream.generated]
    generated_tokens = [list(t) for t in generated_tokens]
    if len(generated_tokens) > stream.n_units:
        raise LengthMismatch("more generated units than received units")
    lens = [len(t) for t in generated_tokens]
    offsets = compute_offsets(stream, lens)
    positions = assign_positions(stream, offsets).all_flat()
    tmask = expand_token_mask(build_seg_mask(stream), stream, within_received, lens)

    parts = [engine.embed_tokens(r.tokens, _type_of(r)) for r in stream.received]
    parts += [engine.embed_tokens(t, GENERATED_TYPE) for t in generated_tokens if t]
    h = np.concatenate(parts, axis=0)

    slices: dict[tuple[str, int], slice] = {}
    start = 0
    for r in stream.received:
        slices[("R", r.arrival_index)] = slice(start, start + r.n_tokens)
        start += r.n_tokens
    n_rec = start
    for u, n in enumerate(lens, start=1):
        slices[("C", u)] = slice(start, start + n)
        start += n

    allowed = tmask.allowed
    attn = []
    for layer in range(engine.config.n_layers):
        q, k, v = engine.qkv(layer, h, positions)
        out, p = engine.attend(q, k, v, allowed)
        if return_attention:
            attn.append(p)
        h = engine.finish_block(layer, h, out)
    return ForwardResult(h, engine.logits(h), n_rec, slices, attn if return_attention else None)


# --- dual KV cache -----------------------------------------------------------


@dataclass(frozen=True)
class KvBlock:
    """Keys/values appended by one write; read-only once created."""

    unit: int
    keys: tuple[np.ndarray, ...]  # per layer, (n, heads, head_dim)
    values: tuple[np.ndarray, ...]
    positions: np.ndarray  # (n, 3)

    @property
    def n_tokens(self) -> int:
        return self.positions.shape[0]


def _concat_layer(blocks: Sequence[KvBlock], layer: int, which: str, H: int, hd: int) -> np.ndarray:
    arrays = [getattr(b, which)[layer] for b in blocks if b.n_tokens]
    if not arrays:
        return np.zeros((0, H, hd))
    return np.concatenate(arrays, axis=0)


@dataclass(frozen=True)
class SourceSnapshot:
    """Immutable view of the first ``n_units`` ingested received units."""

    n_units: int
    blocks: tuple[KvBlock, ...]

    @property
    def n_tokens(self) -> int:
        return sum(b.n_tokens for b in self.blocks)


class DualKvCache:
    """Separate append-only stores for source ingestion and decoding.

    One thread may ingest while another decodes; decoding reads the source
    store only through :meth:`source_snapshot`.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int):
        self.n_layers, self.n_heads, self.head_dim = n_layers, n_heads, head_dim
        self._source: list[KvBlock] = []
        self._decode: list[KvBlock] = []
        self._decoded_units = 0
        self._input_budget = 0
        self._lock = threading.Lock()
        self._source_ready = threading.Condition(self._lock)
        self.backend_log: collections.Counter = collections.Counter()

    @classmethod
    def for_engine(cls, engine: Engine) -> "DualKvCache":
        c = engine.config
        return cls(c.n_layers, c.n_heads, c.head_dim)

    @property
    def n_source_units(self) -> int:
        return len(self._source)

    @property
    def source_len(self) -> int:
        return sum(b.n_tokens for b in self._source)

    @property
    def decode_len(self) -> int:
        return sum(b.n_tokens for b in self._decode)

    @property
    def n_decoded_units(self) -> int:
        return self._decoded_units

    @property
    def input_budget(self) -> int:
        return self._input_budget

    def source_positions(self) -> np.ndarray:
        return np.concatenate([b.positions for b in self._source], axis=0) if self._source else np.zeros((0, 3), np.int64)

    def decode_positions(self) -> np.ndarray:
        return np.concatenate([b.positions for b in self._decode], axis=0) if self._decode else np.zeros((0, 3), np.int64)

    def _append_source(self, block: KvBlock, span: int) -> None:
        with self._source_ready:
            self._source.append(block)
            self._input_budget += span
            self._source_ready.notify_all()

    def _append_decode(self, block: KvBlock) -> None:
        with self._lock:
            self._decode.append(block)

    def _finish_unit(self) -> None:
        with self._lock:
            self._decoded_units += 1

    def _log(self, backend: BackendClass) -> None:
        with self._lock:
            self.backend_log[backend] += 1

    def source_snapshot(self, n_units: int) -> SourceSnapshot:
        with self._lock:
            if len(self._source) < n_units:
                raise SnapshotTooShort(f"snapshot of {n_units} units requested, {len(self._source)} ingested")
            return SourceSnapshot(n_units, tuple(self._source[:n_units]))

    def wait_for_source(self, n_units: int, timeout: float | None = None) -> SourceSnapshot:
        """Block until ``n_units`` received units are ingested, then snapshot them."""
        with self._source_ready:
            if not self._source_ready.wait_for(lambda: len(self._source) >= n_units, timeout):
                raise SnapshotTooShort(f"timed out waiting for {n_units} source units")
            return SourceSnapshot(n_units, tuple(self._source[:n_units]))

    def layer_kv(self, blocks: Sequence[KvBlock], layer: int) -> tuple[np.ndarray, np.ndarray]:
        return (
            _concat_layer(blocks, layer, "keys", self.n_heads, self.head_dim),
            _concat_layer(blocks, layer, "values", self.n_heads, self.head_dim),
        )

    def _bytes(self, blocks: Sequence[KvBlock], n_tokens: int | None) -> bytes:
        chunks = []
        for layer in range(self.n_layers):
            k, v = self.layer_kv(blocks, layer)
            n = k.shape[0] if n_tokens is None else n_tokens
            chunks.append(np.ascontiguousarray(k[:n]).tobytes())
            chunks.append(np.ascontiguousarray(v[:n]).tobytes())
        return b"".join(chunks)

    def source_bytes(self, n_tokens: int | None = None) -> bytes:
        return self._bytes(list(self._source), n_tokens)

    def decode_bytes(self, n_tokens: int | None = None) -> bytes:
        return self._bytes(list(self._decode), n_tokens)


@dataclass
class UnitOutput:
    hidden: np.ndarray
    logits: np.ndarray


@dataclass(frozen=True)
class Teacher:
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass
class DecodeResult:
    """Tokens fed at each step, the argmax after each step, and per-step outputs.

    Greedy decoding feeds ``start_token`` first, then each previous prediction.
    """

    unit: int
    tokens: list[int]
    predictions: list[int]
    hidden: np.ndarray
    logits: np.ndarray = field(repr=False)


def ingest_unit(
    engine: Engine,
    cache: DualKvCache,
    unit: ReceivedUnit,
    offsets: OffsetTable | None = None,
    within_received: WithinUnit | str = WithinUnit.CAUSAL,
) -> UnitOutput:
    """Append one received unit (segment or question) to the source cache."""
    within = WithinUnit.coerce(within_received)
    u = unit.arrival_index
    if u != cache.n_source_units + 1:
        raise OutOfOrderIngest(f"expected unit {cache.n_source_units + 1}, got {u}")
    base = cache.input_budget
    if offsets is not None and offsets.unit_offsets[u - 1] != base:
        raise LengthMismatch(f"offset table gives {offsets.unit_offsets[u - 1]} for unit {u}, cache has {base}")
    positions = received_positions(unit, base)
    n = unit.n_tokens
    prior = list(cache._source)
    prev = sum(b.n_tokens for b in prior)

    local = np.tril(np.ones((n, n), dtype=bool)) if within is WithinUnit.CAUSAL else np.ones((n, n), dtype=bool)
    allowed = np.concatenate([np.ones((n, prev), dtype=bool), local], axis=1)
    cache._log(classify_attention(n, prev + n, is_dense_causal(allowed)))

    h = engine.embed_tokens(unit.tokens, _type_of(unit))
    keys, values = [], []
    for layer in range(engine.config.n_layers):
        q, k, v = engine.qkv(layer, h, positions)
        pk, pv = cache.layer_kv(prior, layer)
        out, _ = engine.attend(q, np.concatenate([pk, k]), np.concatenate([pv, v]), allowed)
        keys.append(_frozen(k))
        values.append(_frozen(v))
        h = engine.finish_block(layer, h, out)
    cache._append_source(KvBlock(u, tuple(keys), tuple(values), _frozen(positions)), unit_span(unit))
    return UnitOutput(h, engine.logits(h))


ingest_segment = ingest_unit


def decode_unit(
    engine: Engine,
    cache: DualKvCache,
    unit_index: int,
    length: int,
    mode: Teacher | Greedy = Greedy(),
    offsets: OffsetTable | None = None,
    snapshot: SourceSnapshot | None = None,
) -> DecodeResult:
    """Autoregressively produce generated unit ``C_u`` into the decode cache."""
    u = unit_index
    if cache.n_decoded_units != u - 1:
        raise OutOfOrderDecode(f"decode cache holds {cache.n_decoded_units} units; cannot decode unit {u}")
    if snapshot is None:
        snapshot = cache.source_snapshot(u)
    if snapshot.n_units > u:
        raise SnapshotTooLong(f"snapshot exposes {snapshot.n_units} source units to unit {u}")
    if snapshot.n_units < u:
        raise SnapshotTooShort(f"snapshot holds {snapshot.n_units} source units, unit {u} needs {u}")
    if length < 0:
        raise LengthMismatch("length must be non-negative")
    if isinstance(mode, Teacher) and len(mode.tokens) != length:
        raise LengthMismatch(f"teacher gives {len(mode.tokens)} tokens for length {length}")

    base = cache.decode_len
    if offsets is not None and len(offsets.gen_offsets) >= u and offsets.gen_offsets[u - 1] != base:
        raise LengthMismatch(f"offset table gives B^C={offsets.gen_offsets[u - 1]}, cache has {base}")

    n_layers = engine.config.n_layers
    src_kv = [cache.layer_kv(snapshot.blocks, layer) for layer in range(n_layers)]
    fed: list[int] = []
    preds: list[int] = []
    hiddens, logits_rows = [], []
    for j in range(length):
        if isinstance(mode, Teacher):
            tok = int(mode.tokens[j])
        else:
            tok = engine.config.start_token if j == 0 else preds[-1]
        fed.append(tok)
        pos = text_positions(1, base + j)
        dec_blocks = list(cache._decode)
        h = engine.embed_tokens([tok], GENERATED_TYPE)
        keys, values = [], []
        for layer in range(n_layers):
            q, k, v = engine.qkv(layer, h, pos)
            sk, sv = src_kv[layer]
            dk, dv = cache.layer_kv(dec_blocks, layer)
            kk = np.concatenate([sk, dk, k])
            vv = np.concatenate([sv, dv, v])
            allowed = np.ones((1, kk.shape[0]), dtype=bool)
            out, _ = engine.attend(q, kk, vv, allowed)
            keys.append(_frozen(k))
            values.append(_frozen(v))
            h = engine.finish_block(layer, h, out)
        cache._log(classify_attention(1, kk.shape[0], False))
        cache._append_decode(KvBlock(u, tuple(keys), tuple(values), _frozen(pos)))
        row = engine.logits(h)[0]
        hiddens.append(h[0])
        logits_rows.append(row)
        preds.append(int(np.argmax(row)))  # first maximum: lowest id wins ties
    cache._finish_unit()
    d, V = engine.config.model_dim, engine.config.vocab_size
    return DecodeResult(
        u,
        fed,
        preds,
        np.array(hiddens).reshape(length, d),
        np.array(logits_rows).reshape(length, V),
    )


decode_generated_unit = decode_unit


@dataclass
class StreamingResult:
    received: list[UnitOutput]
    generated: list[DecodeResult]
    cache: DualKvCache


def forward_streaming(
    engine: Engine,
    stream: UnitStream,
    generated_tokens: Sequence[Sequence[int]] | None = None,
    within_received: WithinUnit | str = WithinUnit.CAUSAL,
) -> StreamingResult:
    """Teacher-forced incremental run: ingest R_u, then decode C_u, for each u."""
    if generated_tokens is None:
        generated_tokens = [g.tokens for g in stream.generated]
    generated_tokens = [tuple(int(t) for t in toks) for toks in generated_tokens]
    offsets = compute_offsets(stream, [len(t) for t in generated_tokens])
    cache = DualKvCache.for_engine(engine)
    rec, gen = [], []
    for r in stream.received:
        rec.append(ingest_unit(engine, cache, r, offsets, within_received))
        u = r.arrival_index
        if u <= len(generated_tokens):
            toks = generated_tokens[u - 1]
            gen.append(decode_unit(engine, cache, u, len(toks), Teacher(toks), offsets))
    return StreamingResult(rec, gen, cache)
