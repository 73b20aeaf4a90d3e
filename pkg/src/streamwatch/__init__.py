"""Streaming video-LLM mechanics at toy scale: interleaved unit streams,
segment-level causal masks, decoupled positional offsets, a dual-KV-cache
reference engine, concurrent ingest/decode scheduling, backlog latency analysis and
a validator for pseudo-streaming CoT documents."""

from .errors import StreamwatchError
from .stream import (
    QuestionDesc,
    SegmentDesc,
    UnitStream,
    VisualGrid,
    build_stream,
    load_stream_spec,
    plan_sampling,
    segment_by_questions,
)
from .mask import WithinUnit, build_seg_mask, classify_attention, expand_token_mask
from .rope import RopeConfig, apply_rope, assign_positions, compute_offsets
from .engine import DualKvCache, EngineConfig, forward_monolithic, forward_streaming, init_engine
from .pipeline import PipelineMode, run_pipeline, ttft
from .latency import LatencyMode, RateConfig, catch_up_closed_form, simulate

__version__ = "0.1.0"

__all__ = [
    "DualKvCache",
    "EngineConfig",
    "LatencyMode",
    "PipelineMode",
    "QuestionDesc",
    "RateConfig",
    "RopeConfig",
    "SegmentDesc",
    "StreamwatchError",
    "UnitStream",
    "VisualGrid",
    "WithinUnit",
    "apply_rope",
    "assign_positions",
    "build_seg_mask",
    "build_stream",
    "catch_up_closed_form",
    "classify_attention",
    "compute_offsets",
    "expand_token_mask",
    "forward_monolithic",
    "forward_streaming",
    "init_engine",
    "load_stream_spec",
    "plan_sampling",
    "run_pipeline",
    "segment_by_questions",
    "simulate",
    "ttft",
]
