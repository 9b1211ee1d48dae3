"""Trace synthesis and replay: drives the full pipeline over request streams
and measures recompute savings, hit rates, deviation against the
full-recompute oracle, and simulated TTFT, for the managed policy and the
baseline policies."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, IoError
from .model import (
    ModelConfig,
    Segment,
    build_model,
    build_request,
    extract_chunk_cache,
    prefill,
)
from .planner import (
    HIT,
    MISS,
    ChunkPlan,
    InferencePlan,
    apply_early_termination,
    build_plan,
    plan_to_request,
    predict_focused,
)
from .scoring import PrefixContext, cci
from .stats import (
    ChunkSpan,
    inter,
    intra,
    question_inter_stream,
    token_inter_scores,
)
from .store import StoreConfig, VariantStore, chunk_hash
from .tiers import DEFAULT_QUEUE_WAIT, TierConfig, demo_tier_config, place_and_migrate, simulate

POLICIES = ("cachecraft", "full_recompute", "full_cache_naive", "exact_prefix")
DEFAULT_WARMUP = 20  # requests excluded from aggregates


@dataclass
class TraceRecord:
    request_id: int
    chunk_ids: list
    question: np.ndarray
    arrival_s: float


@dataclass
class Trace:
    records: list[TraceRecord]
    corpus: dict  # chunk id -> token array

    def __len__(self) -> int:
        return len(self.records)


def gen_synthetic(
    n_chunks: int,
    zipf_s: float,
    k: int,
    n_requests: int,
    chunk_len_range=(16, 64),
    seed: int = 0,
    question_len_range=(8, 16),
    vocab_size: int = 256,
    arrival_rate: float = 2.0,
) -> Trace:
    """Zipf-popularity trace: each request draws k distinct chunks without
    replacement, with a fresh random question. Deterministic by seed."""
    if k > n_chunks:
        raise ArgumentError(f"k ({k}) cannot exceed the corpus size ({n_chunks})")
    if n_chunks < 1 or n_requests < 0:
        raise ArgumentError("corpus and request counts must be non-negative")
    rng = np.random.default_rng(seed)
    lo, hi = chunk_len_range
    corpus = {
        i: rng.integers(0, vocab_size, size=int(rng.integers(lo, hi + 1)))
        for i in range(n_chunks)
    }
    weights = (1.0 / np.arange(1, n_chunks + 1)) ** zipf_s
    weights /= weights.sum()
    qlo, qhi = question_len_range
    records = []
    arrival = 0.0
    for rid in range(n_requests):
        chosen = rng.choice(n_chunks, size=k, replace=False, p=weights)
        question = rng.integers(0, vocab_size, size=int(rng.integers(qlo, qhi + 1)))
        arrival += float(rng.exponential(1.0 / arrival_rate))
        records.append(
            TraceRecord(
                request_id=rid,
                chunk_ids=[int(c) for c in chosen],
                question=question,
                arrival_s=arrival,
            )
        )
    return Trace(records=records, corpus=corpus)


def top_share(trace: Trace, top_fraction: float = 0.05) -> float:
    """Fraction of all retrievals landing on the most popular chunks."""
    counts = {}
    total = 0
    for rec in trace.records:
        for cid in rec.chunk_ids:
            counts[cid] = counts.get(cid, 0) + 1
            total += 1
    if total == 0:
        return 0.0
    top_n = max(1, int(math.ceil(top_fraction * len(trace.corpus))))
    ranked = sorted(counts.values(), reverse=True)
    return sum(ranked[:top_n]) / total


def fit_zipf_skew(
    n_chunks: int,
    k: int,
    n_requests: int,
    target_share: float = 0.6,
    seed: int = 0,
    iterations: int = 18,
    **gen_kwargs,
) -> float:
    """Bisect the Zipf exponent until the top-5% retrieval share hits the
    target (the production-workload shape)."""
    lo, hi = 0.0, 4.0
    for _ in range(iterations):
        mid = (lo + hi) / 2
        share = top_share(gen_synthetic(n_chunks, mid, k, n_requests, seed=seed, **gen_kwargs))
        if share < target_share:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def save_trace(trace: Trace, path):
    """One JSON object per line; chunk contents go to a sidecar corpus file."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in trace.records:
                fh.write(
                    json.dumps(
                        {
                            "id": rec.request_id,
                            "chunks": list(rec.chunk_ids),
                            "question": [int(t) for t in rec.question],
                            "arrival_s": rec.arrival_s,
                        }
                    )
                    + "\n"
                )
        with open(_corpus_path(path), "w", encoding="utf-8") as fh:
            json.dump({str(cid): [int(t) for t in toks] for cid, toks in trace.corpus.items()}, fh)
    except OSError as exc:
        raise IoError(f"cannot write trace {path}: {exc}") from exc


def load_trace(path) -> Trace:
    try:
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                records.append(
                    TraceRecord(
                        request_id=obj["id"],
                        chunk_ids=obj["chunks"],
                        question=np.asarray(obj["question"], dtype=np.int64),
                        arrival_s=obj["arrival_s"],
                    )
                )
        with open(_corpus_path(path), "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read trace {path}: {exc}") from exc
    corpus = {}
    for key, toks in raw.items():
        cid = int(key) if key.lstrip("-").isdigit() else key
        corpus[cid] = np.asarray(toks, dtype=np.int64)
    return Trace(records=records, corpus=corpus)


def _corpus_path(path) -> str:
    return f"{os.fspath(path)}.corpus.json"


@dataclass
class RequestMetrics:
    request_id: int
    arrival_s: float
    k: int
    hits: int
    tokens_total: int
    tokens_computed: int
    tokens_reused: int
    recompute_fraction: float
    tokens_hit_total: int  # tokens belonging to reused (hit) chunks
    tokens_hit_recomputed: int  # of those, how many were recomputed
    token_layers: int
    deviation: float
    ttft: float
    mean_cfo: float


@dataclass
class Report:
    policy: str
    alpha: float
    warmup: int
    requests: list[RequestMetrics] = field(default_factory=list)

    def steady_state(self) -> list[RequestMetrics]:
        return self.requests[self.warmup :]

    def aggregate(self) -> dict:
        rows = self.steady_state()
        if not rows:
            return {
                "n_requests": 0,
                "tokens_total": 0,
                "tokens_computed": 0,
                "tokens_reused": 0,
                "recompute_fraction": 0.0,
                "hit_recompute_fraction": 0.0,
                "mean_deviation": 0.0,
                "mean_ttft": 0.0,
                "hit_rate": 0.0,
                "mean_cfo": 0.0,
                "token_layers": 0,
            }
        total = sum(r.tokens_total for r in rows)
        computed = sum(r.tokens_computed for r in rows)
        hit_total = sum(r.tokens_hit_total for r in rows)
        hit_recomputed = sum(r.tokens_hit_recomputed for r in rows)
        return {
            "n_requests": len(rows),
            "tokens_total": total,
            "tokens_computed": computed,
            "tokens_reused": total - computed,
            "recompute_fraction": computed / total if total else 0.0,
            "hit_recompute_fraction": hit_recomputed / hit_total if hit_total else 0.0,
            "mean_deviation": float(np.mean([r.deviation for r in rows])),
            "mean_ttft": float(np.mean([r.ttft for r in rows])),
            "hit_rate": sum(r.hits for r in rows) / max(1, sum(r.k for r in rows)),
            "mean_cfo": float(np.mean([r.mean_cfo for r in rows])),
            "token_layers": sum(r.token_layers for r in rows),
        }


_CSV_COLUMNS = (
    "request_id",
    "arrival_s",
    "k",
    "hits",
    "tokens_total",
    "tokens_computed",
    "tokens_reused",
    "recompute_fraction",
    "tokens_hit_total",
    "tokens_hit_recomputed",
    "token_layers",
    "deviation",
    "ttft",
    "mean_cfo",
)


def export_report(report: Report, path, fmt: str = "csv"):
    """CSV holds the steady-state rows (floats at 6 significant digits);
    JSON holds everything and round-trips exactly."""
    if fmt not in ("csv", "json"):
        raise ArgumentError(f"unknown export format {fmt!r}")
    try:
        if fmt == "csv":
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(",".join(_CSV_COLUMNS) + "\n")
                for row in report.steady_state():
                    values = []
                    for col in _CSV_COLUMNS:
                        v = getattr(row, col)
                        values.append(f"{v:.6g}" if isinstance(v, float) else str(v))
                    fh.write(",".join(values) + "\n")
        else:
            payload = {
                "policy": report.policy,
                "alpha": report.alpha,
                "warmup": report.warmup,
                "aggregate": report.aggregate(),
                "requests": [asdict(r) for r in report.requests],
            }
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2)
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


def load_report(path) -> Report:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    return Report(
        policy=payload["policy"],
        alpha=payload["alpha"],
        warmup=payload["warmup"],
        requests=[RequestMetrics(**r) for r in payload["requests"]],
    )


def _spans_from_request(request, chunk_ids) -> list[ChunkSpan]:
    spans = []
    for cid, (start, stop) in zip(chunk_ids, request.segment_slots):
        spans.append(ChunkSpan(chunk_id=cid, start=start, length=stop - start))
    return spans


def _fresh_chunk_stats(attn, spans, i):
    """Creation-time metadata of a freshly computed chunk: per-prefix inter
    weights (layer-summed), context ratios, and per-token scores."""
    n_layers = attn.n_layers
    span = spans[i]
    a_layers = np.zeros(n_layers)
    weights = {}
    for j in range(i):
        inter_layers = np.array([inter(attn, spans, j, i, l) for l in range(n_layers)])
        a_layers += inter_layers / (span.length * spans[j].length)
        cid = spans[j].chunk_id
        weights[cid] = weights.get(cid, 0.0) + float(inter_layers.sum())
    intra_layers = np.array([intra(attn, spans, i, l) for l in range(n_layers)])
    b_layers = intra_layers / span.length**2
    scores = token_inter_scores(attn, spans, i)
    prefix_ids = []
    for j in range(i):
        cid = spans[j].chunk_id
        if cid not in prefix_ids:
            prefix_ids.append(cid)
    prefix = PrefixContext(
        chunk_ids=tuple(prefix_ids), weights=tuple(weights[c] for c in prefix_ids)
    )
    return prefix, float(a_layers.mean()), float(b_layers.mean()), scores


def _oracle_hidden(model, chunk_tokens, question):
    request = build_request([Segment(tokens=t) for t in chunk_tokens], question)
    result = prefill(model, request)
    q0, q1 = result.question_span
    return result.hidden[q0:q1]


def question_deviation(hidden_rows, oracle_rows) -> float:
    """Mean per-token L2 distance over the question span."""
    if hidden_rows.shape != oracle_rows.shape:
        raise ArgumentError("question spans differ between run and oracle")
    if hidden_rows.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(hidden_rows - oracle_rows, axis=1).mean())


def _naive_plan(chunk_tokens, chunk_hashes, question, store, alpha) -> InferencePlan:
    chunks = []
    for toks, cid in zip(chunk_tokens, chunk_hashes):
        variants = store.lookup(cid)
        if variants:
            latest = max(variants, key=lambda v: (v.created_at, v.variant_id))
            chunks.append(
                ChunkPlan(
                    chunk_id=cid,
                    status=HIT,
                    tokens=toks,
                    n_tokens=toks.size,
                    n_slots=latest.cache.n_slots,
                    variant_id=latest.variant_id,
                    cfo=0.0,
                    recompute=np.empty(0, dtype=np.int64),
                    cache=latest.cache,
                )
            )
        else:
            chunks.append(
                ChunkPlan(chunk_id=cid, status=MISS, tokens=toks, n_tokens=toks.size, n_slots=toks.size)
            )
    return InferencePlan(chunks=chunks, question=question, alpha=alpha)


def _execute_planned(model, plan, chunk_hashes, store, oracle_q, use_focus):
    """Run a planned partial prefill, optionally with focused-chunk early
    termination, update the store, and return (metrics pieces, plan)."""
    request = plan_to_request(plan)
    result = prefill(model, request)
    n_layers = model.config.n_layers

    can_terminate = (
        use_focus
        and len(plan.chunks) >= 3
        and any(
            cp.status == HIT and cp.recompute is not None and cp.recompute.size
            for cp in plan.chunks
        )
    )
    if can_terminate:
        spans = _spans_from_request(request, chunk_hashes)
        stream = question_inter_stream(result.attn, spans, result.question_span)
        focus = predict_focused(stream, plan.focus_window)
        unfocused = set(range(len(plan.chunks))) - set(focus.focused)
        needs_rerun = focus.cutoff_layer < n_layers and any(
            plan.chunks[i].status == HIT
            and plan.chunks[i].recompute is not None
            and plan.chunks[i].recompute.size
            for i in unfocused
        )
        if needs_rerun:
            plan = apply_early_termination(plan, focus)
            request = plan_to_request(plan)
            result = prefill(model, request)

    q0, q1 = result.question_span
    deviation = question_deviation(result.hidden[q0:q1], oracle_q)

    spans = _spans_from_request(request, chunk_hashes)
    for i, cp in enumerate(plan.chunks):
        if cp.status == MISS:
            prefix, a_bar, b_bar, scores = _fresh_chunk_stats(result.attn, spans, i)
            cache = extract_chunk_cache(
                result, spans[i].start, spans[i].stop, source_prefix=prefix.chunk_ids
            )
            store.insert(
                cp.chunk_id,
                prefix=prefix,
                a_bar=a_bar,
                b_bar=b_bar,
                cci=cci(a_bar, b_bar),
                token_scores=scores,
                cache=cache,
            )
        else:
            store.touch(cp.variant_id, cp.cfo)
    return result, plan, deviation


def _prefix_keys(chunk_tokens):
    """Running content hashes of every chunk-boundary prefix."""
    digest = hashlib.blake2b(digest_size=16)
    keys = []
    for toks in chunk_tokens:
        digest.update(np.asarray(toks, dtype=np.int64).tobytes())
        keys.append(digest.copy().hexdigest())
    return keys


def replay(
    trace: Trace,
    model_cfg: ModelConfig | None = None,
    store_cfg: StoreConfig | None = None,
    tier_cfg: TierConfig | None = None,
    alpha: float = 1.0,
    policy: str = "cachecraft",
    warmup: int = DEFAULT_WARMUP,
    queue_wait: float = DEFAULT_QUEUE_WAIT,
    focus_window: int = 3,
    use_focus: bool = True,
) -> Report:
    """Replay a trace under one policy, measuring work, deviation against the
    full-recompute oracle, and simulated TTFT per request."""
    if policy not in POLICIES:
        raise ArgumentError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    model_cfg = model_cfg or ModelConfig()
    model = build_model(model_cfg)
    store = VariantStore(store_cfg or StoreConfig())
    tier_cfg = tier_cfg or demo_tier_config(model_cfg.n_layers, model_cfg.d_model)
    report = Report(policy=policy, alpha=alpha, warmup=warmup)
    prefix_registry: set[str] = set()

    for rec in trace.records:
        chunk_tokens = [np.asarray(trace.corpus[cid], dtype=np.int64) for cid in rec.chunk_ids]
        question = np.asarray(rec.question, dtype=np.int64)
        k = len(chunk_tokens)
        tokens_total = sum(t.size for t in chunk_tokens) + question.size
        chunk_hashes = [chunk_hash(t) for t in chunk_tokens]
        placement = place_and_migrate(store.variants(), tier_cfg)
        oracle_q = _oracle_hidden(model, chunk_tokens, question)

        if policy == "full_recompute":
            plan = InferencePlan(
                chunks=[
                    ChunkPlan(chunk_id=cid, status=MISS, tokens=t, n_tokens=t.size, n_slots=t.size)
                    for cid, t in zip(chunk_hashes, chunk_tokens)
                ],
                question=question,
                alpha=alpha,
            )
            computed = tokens_total
            hits = 0
            deviation = 0.0
            token_layers = tokens_total * model_cfg.n_layers
            mean_cfo = 1.0
            hit_total = hit_recomputed = 0
            timeline = simulate(plan, placement, tier_cfg, queue_wait)
        elif policy == "exact_prefix":
            keys = _prefix_keys(chunk_tokens)
            hits = 0
            for key in keys:
                if key in prefix_registry:
                    hits += 1
                else:
                    break
            reused = sum(t.size for t in chunk_tokens[:hits])
            computed = tokens_total - reused
            deviation = 0.0
            token_layers = computed * model_cfg.n_layers
            mean_cfo = (hits * 0.0 + (k - hits) * 1.0) / k if k else 1.0
            hit_total, hit_recomputed = reused, 0
            pseudo_chunks = []
            pseudo_placement = dict(placement)
            for i, (cid, t) in enumerate(zip(chunk_hashes, chunk_tokens)):
                if i < hits:
                    vid = -(i + 1)
                    pseudo_chunks.append(
                        ChunkPlan(
                            chunk_id=cid,
                            status=HIT,
                            tokens=t,
                            n_tokens=t.size,
                            n_slots=t.size,
                            variant_id=vid,
                            cfo=0.0,
                            recompute=np.empty(0, dtype=np.int64),
                        )
                    )
                    pseudo_placement[vid] = tier_cfg.tiers[0].name
                else:
                    pseudo_chunks.append(
                        ChunkPlan(chunk_id=cid, status=MISS, tokens=t, n_tokens=t.size, n_slots=t.size)
                    )
            plan = InferencePlan(chunks=pseudo_chunks, question=question, alpha=alpha)
            timeline = simulate(plan, pseudo_placement, tier_cfg, queue_wait)
            prefix_registry.update(keys)
        else:
            if policy == "cachecraft":
                plan = build_plan(chunk_tokens, question, store, alpha, focus_window)
            else:  # full_cache_naive
                plan = _naive_plan(chunk_tokens, chunk_hashes, question, store, alpha)
            result, plan, deviation = _execute_planned(
                model, plan, chunk_hashes, store, oracle_q,
                use_focus=(policy == "cachecraft" and use_focus),
            )
            computed = plan.tokens_recomputed()
            hits = plan.hit_count
            token_layers = sum(result.active_per_layer)
            cfos = [cp.cfo if cp.status == HIT else 1.0 for cp in plan.chunks]
            mean_cfo = float(np.mean(cfos)) if cfos else 1.0
            hit_total = sum(cp.n_tokens for cp in plan.chunks if cp.status == HIT)
            hit_recomputed = sum(
                int(cp.recompute.size)
                for cp in plan.chunks
                if cp.status == HIT and cp.recompute is not None
            )
            timeline = simulate(plan, placement, tier_cfg, queue_wait)

        report.requests.append(
            RequestMetrics(
                request_id=rec.request_id,
                arrival_s=rec.arrival_s,
                k=k,
                hits=hits,
                tokens_total=tokens_total,
                tokens_computed=computed,
                tokens_reused=tokens_total - computed,
                recompute_fraction=computed / tokens_total if tokens_total else 0.0,
                tokens_hit_total=hit_total,
                tokens_hit_recomputed=hit_recomputed,
                token_layers=token_layers,
                deviation=deviation,
                ttft=timeline.ttft,
                mean_cfo=mean_cfo,
            )
        )
    return report


def calibration_evaluator(trace, model_cfg=None, store_cfg=None, tier_cfg=None, **replay_kwargs):
    """Evaluator for alpha calibration: returns (mean CFO, quality) where
    quality = 1/(1+mean deviation) on the replayed trace."""

    def evaluate(alpha: float):
        report = replay(
            trace,
            model_cfg=model_cfg,
            store_cfg=store_cfg,
            tier_cfg=tier_cfg,
            alpha=alpha,
            policy="cachecraft",
            **replay_kwargs,
        )
        agg = report.aggregate()
        return agg["mean_cfo"], 1.0 / (1.0 + agg["mean_deviation"])

    return evaluate
