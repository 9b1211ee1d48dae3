"""Chunk-level KV-cache management: reusability scoring, selective
recomputation planning, a bounded variant store, tiered-storage simulation,
and a deterministic reference transformer to validate everything against."""

from .errors import (
    ArgumentError,
    CacheCraftError,
    ConfigError,
    InfeasibleError,
    IoError,
    NotFoundError,
    PlacementError,
    PlanError,
    ShapeError,
)
from .harness import (
    Report,
    RequestMetrics,
    Trace,
    TraceRecord,
    export_report,
    fit_zipf_skew,
    gen_synthetic,
    load_report,
    load_trace,
    replay,
    save_trace,
)
from .model import (
    AttentionRecord,
    ChunkCache,
    KVCache,
    Model,
    ModelConfig,
    PrefillRequest,
    PrefillResult,
    Segment,
    build_model,
    build_request,
    decode,
    extract_chunk_cache,
    plain_request,
    prefill,
)
from .planner import (
    ChunkPlan,
    FocusResult,
    InferencePlan,
    apply_early_termination,
    build_plan,
    plan_from_json,
    plan_to_json,
    plan_to_request,
    predict_focused,
    select_tokens,
)
from .rpe import apply_rpe, remove_rpe
from .scoring import (
    PrefixContext,
    ReuseScore,
    adjusted_beta,
    beta,
    calibrate_alpha,
    cci,
    cfo,
    evaluate_grid,
    gamma,
    score_variant,
    select_alpha,
)
from .stats import (
    AttentionStats,
    ChunkSpan,
    compute_stats,
    context_ratios,
    diagonal_mass,
    inter,
    intra,
    question_inter_stream,
    spans_from_lengths,
    token_inter_scores,
)
from .store import StoreConfig, Variant, VariantStore, chunk_hash, pad_to_blocks
from .tiers import (
    Tier,
    TierConfig,
    Timeline,
    demo_tier_config,
    fallback_decision,
    place_and_migrate,
    preload_depth,
    simulate,
    timeline_to_csv,
)

__version__ = "0.1.0"
