"""Decode-time KV cache eviction toolkit.

Momentum-based attention scoring plus the classic eviction baselines, driven
either by a deterministic toy decoder (closed loop) or by recorded attention
traces (open loop), with metrics and a CLI for reproducible comparisons.
"""

from .cache_core import CachePool, ImportanceVector, Phase, TokenSlot
from .policies import (
    AttentionRow,
    EvictionDecision,
    EvictionPolicy,
    FullCachePolicy,
    H2OPolicy,
    MomentKVPolicy,
    PolicyConfig,
    PolicyKind,
    ScopeSlidePolicy,
    StreamingSinkPolicy,
    make_policy,
    validate_attention_row,
)
from .attention_engine import ModelSpec, StepOutput, ToyDecoder, positional_encoding, run_closed_loop
from .trace import (
    TraceFile,
    TraceHeader,
    TraceSource,
    TraceStep,
    gen_heavy_hitter_trace,
    gen_recency_burst_trace,
    read_trace,
    replay,
    trace_from_closed_loop,
    write_trace,
)
from .metrics import (
    PolicyReport,
    StepRecord,
    eviction_oracle_agreement,
    hitter_retention,
    measure_policy_cost,
    recency_cdf,
    retained_mass,
    timing_report,
    trace_hitter_positions,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionRow",
    "CachePool",
    "EvictionDecision",
    "EvictionPolicy",
    "FullCachePolicy",
    "H2OPolicy",
    "ImportanceVector",
    "ModelSpec",
    "MomentKVPolicy",
    "Phase",
    "PolicyConfig",
    "PolicyKind",
    "PolicyReport",
    "ScopeSlidePolicy",
    "StepOutput",
    "StepRecord",
    "StreamingSinkPolicy",
    "TokenSlot",
    "ToyDecoder",
    "TraceFile",
    "TraceHeader",
    "TraceSource",
    "TraceStep",
    "eviction_oracle_agreement",
    "gen_heavy_hitter_trace",
    "gen_recency_burst_trace",
    "hitter_retention",
    "make_policy",
    "measure_policy_cost",
    "positional_encoding",
    "read_trace",
    "recency_cdf",
    "replay",
    "retained_mass",
    "run_closed_loop",
    "timing_report",
    "trace_from_closed_loop",
    "trace_hitter_positions",
    "validate_attention_row",
    "write_trace",
]
