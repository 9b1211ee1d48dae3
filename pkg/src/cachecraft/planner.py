"""Turns reuse scores into executable work: top-N token selection, focused-
chunk prediction over the layer stream, and per-request inference plans."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError
from .model import FULL_DEPTH, ChunkCache, PrefillRequest, Segment, build_request
from .scoring import ReuseScore, score_variant


def select_tokens(token_scores, cfo_val: float) -> np.ndarray:
    """Indices of the ceil(cfo*|C|) highest-scoring tokens, ascending.

    Ties go to the smaller index so replays are deterministic.
    """
    if not 0.0 <= cfo_val <= 1.0:
        raise ArgumentError(f"cfo must lie in [0,1], got {cfo_val}")
    scores = np.asarray(token_scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ArgumentError("token scores must be a vector")
    if not np.all(np.isfinite(scores)):
        raise ArgumentError("token scores must be finite")
    n = scores.size
    count = min(n, int(math.ceil(cfo_val * n - 1e-9))) if cfo_val > 0 else 0
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:count])


@dataclass(frozen=True)
class FocusResult:
    focused: tuple  # chunk positions within the request
    cutoff_layer: int  # 1-based; recomputation beyond this layer is dropped
    degenerate: bool = False


def predict_focused(cinter_stream, w: int) -> FocusResult:
    """Focused-chunk prediction over the per-layer question->chunk stream.

    ``cinter_stream`` is [L, k]. Per layer: cumulate, sort descending, take
    successive differences, normalize, and locate the largest jump between
    consecutive prefix entropies; the chunks above the jump are that layer's
    candidate set. The set must repeat for ``w`` consecutive layers to be
    accepted; otherwise every chunk stays focused through all L layers.
    k < 3 cannot produce an entropy jump and falls back the same way.
    """
    stream = np.asarray(cinter_stream, dtype=np.float64)
    if stream.ndim != 2:
        raise ArgumentError("cinter stream must be [L, k]")
    if w < 1:
        raise ArgumentError("confidence window w must be >= 1")
    n_layers, k = stream.shape
    everything = FocusResult(focused=tuple(range(k)), cutoff_layer=n_layers)
    if k < 3:
        return replace(everything, degenerate=True)

    cum = np.zeros(k)
    history: list[frozenset] = []
    for layer in range(1, n_layers + 1):
        cum += stream[layer - 1]
        order = np.lexsort((np.arange(k), -cum))
        ranked = cum[order]
        diffs = ranked[:-1] - ranked[1:]
        total = diffs.sum()
        if total <= 0:
            current = frozenset(range(k))  # no separation at this layer
        else:
            p = diffs / total
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(p > 0, -p * np.log(p), 0.0)
            prefix_entropy = np.cumsum(terms)
            jumps = prefix_entropy[1:] - prefix_entropy[:-1]
            i_star = int(np.argmax(jumps))  # first max wins on ties
            current = frozenset(int(c) for c in order[: i_star + 1])
        history.append(current)
        if layer >= w and all(f == current for f in history[-w:]):
            return FocusResult(focused=tuple(sorted(current)), cutoff_layer=layer)
    return everything


MISS = "miss"
HIT = "hit"


@dataclass
class ChunkPlan:
    chunk_id: str
    status: str  # MISS or HIT
    tokens: np.ndarray | None
    n_tokens: int
    n_slots: int
    variant_id: int | None = None
    cfo: float = 1.0
    recompute: np.ndarray | None = None  # ascending within-chunk indices
    recompute_depth: int | None = None  # None = full depth
    score: ReuseScore | None = None
    cache: ChunkCache | None = None


@dataclass
class InferencePlan:
    chunks: list[ChunkPlan]
    question: np.ndarray
    alpha: float
    focus_window: int = 3

    @property
    def hit_count(self) -> int:
        return sum(1 for c in self.chunks if c.status == HIT)

    def tokens_total(self) -> int:
        return sum(c.n_tokens for c in self.chunks) + int(np.asarray(self.question).size)

    def tokens_recomputed(self) -> int:
        """Fresh chunks, recompute tokens of hit chunks, and the question."""
        total = int(np.asarray(self.question).size)
        for c in self.chunks:
            if c.status == MISS:
                total += c.n_tokens
            elif c.recompute is not None:
                total += int(c.recompute.size)
        return total


def build_plan(chunk_token_lists, question, store, alpha: float, focus_window: int = 3) -> InferencePlan:
    """Classify chunks into hit/miss and pick the cheapest variant per hit.

    Every live variant of a chunk is scored against the new prefix; the one
    with the lowest CFO wins (ties to the smaller variant id), and its
    recompute set comes from the persisted per-token scores.
    """
    from .store import chunk_hash  # local import to avoid a cycle

    chunk_ids = [chunk_hash(toks) for toks in chunk_token_lists]
    plans = []
    for i, (cid, toks) in enumerate(zip(chunk_ids, chunk_token_lists)):
        toks = np.asarray(toks, dtype=np.int64)
        seen = set()
        new_prefix = [c for c in chunk_ids[:i] if not (c in seen or seen.add(c))]
        variants = store.lookup(cid)
        if not variants:
            plans.append(
                ChunkPlan(chunk_id=cid, status=MISS, tokens=toks, n_tokens=toks.size, n_slots=toks.size)
            )
            continue
        best = None
        best_score = None
        for var in variants:
            sc = score_variant(var.prefix, var.cci, new_prefix, alpha)
            if best is None or (sc.cfo, var.variant_id) < (best_score.cfo, best.variant_id):
                best, best_score = var, sc
        indices = select_tokens(best.token_scores, best_score.cfo)
        plans.append(
            ChunkPlan(
                chunk_id=cid,
                status=HIT,
                tokens=toks,
                n_tokens=toks.size,
                n_slots=best.cache.n_slots,
                variant_id=best.variant_id,
                cfo=best_score.cfo,
                recompute=indices,
                score=best_score,
                cache=best.cache,
            )
        )
    return InferencePlan(
        chunks=plans,
        question=np.asarray(question, dtype=np.int64),
        alpha=alpha,
        focus_window=focus_window,
    )


def apply_early_termination(plan: InferencePlan, focus: FocusResult) -> InferencePlan:
    """Cap recomputation of unfocused hit chunks at the cutoff layer.

    Fresh (miss) chunks always compute all layers; only recompute tokens of
    cached chunks are cut short, falling back to their stale rows.
    """
    focused = set(focus.focused)
    chunks = []
    for i, cp in enumerate(plan.chunks):
        if cp.status == HIT and i not in focused and cp.recompute is not None and cp.recompute.size:
            chunks.append(replace(cp, recompute_depth=focus.cutoff_layer))
        else:
            chunks.append(cp)
    return InferencePlan(
        chunks=chunks, question=plan.question, alpha=plan.alpha, focus_window=plan.focus_window
    )


def plan_to_request(plan: InferencePlan) -> PrefillRequest:
    """Resolve a plan into the engine's segment layout."""
    segments = []
    for cp in plan.chunks:
        if cp.status == MISS:
            segments.append(Segment(tokens=cp.tokens))
            continue
        mask = np.zeros(cp.n_tokens, dtype=bool)
        if cp.recompute is not None:
            mask[cp.recompute] = True
        depth = np.zeros(cp.n_tokens, dtype=np.int64)
        depth[mask] = FULL_DEPTH if cp.recompute_depth is None else cp.recompute_depth
        segments.append(
            Segment(tokens=cp.tokens, cache=cp.cache, recompute=mask, recompute_depth=depth)
        )
    return build_request(segments, plan.question)


def plan_to_json(plan: InferencePlan) -> str:
    payload = {
        "alpha": plan.alpha,
        "focus_window": plan.focus_window,
        "question_tokens": int(np.asarray(plan.question).size),
        "chunks": [
            {
                "chunk_id": cp.chunk_id,
                "status": cp.status,
                "n_tokens": cp.n_tokens,
                "n_slots": cp.n_slots,
                "variant_id": cp.variant_id,
                "cfo": round(cp.cfo, 6),
                "recompute": [] if cp.recompute is None else [int(i) for i in cp.recompute],
                "recompute_depth": cp.recompute_depth,
            }
            for cp in plan.chunks
        ],
    }
    return json.dumps(payload, indent=2)


def plan_from_json(text: str) -> InferencePlan:
    """Rebuild the planning metadata (no token ids, no payloads); enough for
    the tier simulator and for inspection."""
    payload = json.loads(text)
    chunks = []
    for item in payload["chunks"]:
        chunks.append(
            ChunkPlan(
                chunk_id=item["chunk_id"],
                status=item["status"],
                tokens=None,
                n_tokens=item["n_tokens"],
                n_slots=item["n_slots"],
                variant_id=item["variant_id"],
                cfo=item["cfo"],
                recompute=np.asarray(item["recompute"], dtype=np.int64),
                recompute_depth=item["recompute_depth"],
            )
        )
    return InferencePlan(
        chunks=chunks,
        question=np.zeros(payload["question_tokens"], dtype=np.int64),
        alpha=payload["alpha"],
        focus_window=payload["focus_window"],
    )
