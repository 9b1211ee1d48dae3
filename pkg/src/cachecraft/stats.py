"""Inter/intra attention aggregates and per-token contextualization scores.

All quantities are computed from head-averaged softmax weights. ``inter``
follows the block-matrix convention: queries live in the later chunk, keys
in the earlier one (the literal summation direction is zero under causal
masking). ``intra`` is the strictly-below-diagonal mass; the diagonal
(self-attention) is tracked separately so the row-stochastic accounting
closes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .model import AttentionRecord


@dataclass(frozen=True)
class ChunkSpan:
    """Slot range of one chunk's real tokens within a request layout."""

    chunk_id: object
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def slots(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


def spans_from_lengths(chunk_ids, lengths, slot_lengths=None) -> list[ChunkSpan]:
    """Build spans for chunks laid out back to back.

    ``slot_lengths`` gives each chunk's padded slot count when it differs
    from its real token count.
    """
    if slot_lengths is None:
        slot_lengths = lengths
    spans = []
    cursor = 0
    for cid, n_real, n_slots in zip(chunk_ids, lengths, slot_lengths):
        if n_real < 1 or n_slots < n_real:
            raise ArgumentError(f"bad span lengths for chunk {cid}: {n_real}/{n_slots}")
        spans.append(ChunkSpan(chunk_id=cid, start=cursor, length=n_real))
        cursor += n_slots
    return spans


def _rows_for(attn: AttentionRecord, layer: int, span: ChunkSpan) -> np.ndarray:
    lookup = attn.row_lookup(layer)
    rows = []
    for slot in range(span.start, span.stop):
        if slot not in lookup:
            raise ArgumentError(
                f"attention rows missing for slot {slot} at layer {layer}; "
                "stats need fully computed chunks"
            )
        rows.append(lookup[slot])
    return np.asarray(rows, dtype=np.int64)


def inter(attn: AttentionRecord, spans, i: int, j: int, layer: int) -> float:
    """Cumulative head-averaged mass from chunk j's queries onto chunk i's keys."""
    if i >= j:
        raise ArgumentError(f"inter needs i < j in span order, got {i} >= {j}")
    a = attn.head_mean(layer)
    rows = _rows_for(attn, layer, spans[j])
    cols = spans[i].slots()
    return float(a[np.ix_(rows, cols)].sum())


def intra(attn: AttentionRecord, spans, i: int, layer: int) -> float:
    """Mass within chunk i strictly below the diagonal (self excluded)."""
    a = attn.head_mean(layer)
    span = spans[i]
    rows = _rows_for(attn, layer, span)
    block = a[np.ix_(rows, span.slots())]
    return float(np.tril(block, k=-1).sum())


def diagonal_mass(attn: AttentionRecord, spans, i: int, layer: int) -> float:
    a = attn.head_mean(layer)
    span = spans[i]
    rows = _rows_for(attn, layer, span)
    return float(a[rows, span.slots()].sum())


def token_inter_scores(attn: AttentionRecord, spans, i: int) -> np.ndarray:
    """Per-token mass from chunk i's queries onto all earlier chunks, summed
    over layers. Chunk 0 has no prefix: all zeros."""
    span = spans[i]
    scores = np.zeros(span.length)
    if i == 0:
        return scores
    prefix_cols = np.concatenate([spans[j].slots() for j in range(i)])
    for layer in range(attn.n_layers):
        a = attn.head_mean(layer)
        rows = _rows_for(attn, layer, span)
        scores += a[np.ix_(rows, prefix_cols)].sum(axis=1)
    return scores


@dataclass
class AttentionStats:
    """Aggregates for one request layout: per-layer inter/intra tables plus
    the layer-averaged context ratios feeding CCI."""

    spans: list[ChunkSpan]
    inter_table: dict  # (i, j) -> np.ndarray[L]
    intra_table: dict  # i -> np.ndarray[L]
    diag_table: dict  # i -> np.ndarray[L]
    token_inter: dict  # i -> np.ndarray[len_i]
    n_layers: int

    def inter_layer_sum(self, i: int, j: int) -> float:
        return float(self.inter_table[(i, j)].sum())

    def prefix_weights(self, i: int) -> dict:
        """Creation-time inter totals per prefix chunk id (layer-summed)."""
        return {
            self.spans[j].chunk_id: self.inter_layer_sum(j, i) for j in range(i)
        }


def compute_stats(attn: AttentionRecord, spans) -> AttentionStats:
    L = attn.n_layers
    inter_table, intra_table, diag_table, token_table = {}, {}, {}, {}
    for i in range(len(spans)):
        intra_table[i] = np.array([intra(attn, spans, i, l) for l in range(L)])
        diag_table[i] = np.array([diagonal_mass(attn, spans, i, l) for l in range(L)])
        token_table[i] = token_inter_scores(attn, spans, i)
        for j in range(i):
            inter_table[(j, i)] = np.array([inter(attn, spans, j, i, l) for l in range(L)])
    return AttentionStats(
        spans=list(spans),
        inter_table=inter_table,
        intra_table=intra_table,
        diag_table=diag_table,
        token_inter=token_table,
        n_layers=L,
    )


def context_ratios(stats: AttentionStats, i: int) -> tuple[float, float]:
    """Layer means of the normalized outside/self contextualization sums."""
    span = stats.spans[i]
    a_layers = np.zeros(stats.n_layers)
    for j in range(i):
        a_layers += stats.inter_table[(j, i)] / (span.length * stats.spans[j].length)
    b_layers = stats.intra_table[i] / span.length**2
    return float(a_layers.mean()), float(b_layers.mean())


def question_inter_stream(attn: AttentionRecord, spans, question_span) -> np.ndarray:
    """Per-layer mass from the question's queries onto each chunk: the
    ``cinter`` input stream of focused-chunk prediction. Shape [L, k]."""
    q_start, q_stop = question_span
    L, k = attn.n_layers, len(spans)
    stream = np.zeros((L, k))
    if q_stop == q_start:
        return stream
    for layer in range(L):
        a = attn.head_mean(layer)
        lookup = attn.row_lookup(layer)
        rows = np.asarray([lookup[s] for s in range(q_start, q_stop) if s in lookup])
        if rows.size == 0:
            continue
        for i, span in enumerate(spans):
            stream[layer, i] = a[np.ix_(rows, span.slots())].sum()
    return stream
