"""Deterministic reference transformer: plain prefill, partial prefill with
injected chunk-caches, and greedy decode.

This model is both the system under management and the ground-truth oracle.
Weights are drawn from a seeded stream, so every run is reproducible down to
the bit. Keys are kept position-free everywhere outside the attention kernel:
the rotary embedding is applied on the fly at each token's current absolute
position, which is what makes a cached chunk relocatable.

Partial prefill semantics:

* every slot is either a fresh token (query/key/value computed), a reused
  cache row (key/value taken from the injected chunk-cache), or a pad row
  (zero, masked from attention, consuming no position);
* a token marked for recomputation runs through layers ``1..depth`` and falls
  back to its stale cached rows beyond that (``depth < n_layers`` is how
  early termination of recomputation is expressed);
* attention rows are materialized only for tokens active at that layer, and
  a query at position p sees exactly the non-pad keys at positions <= p.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PlanError, ShapeError
from .rpe import DEFAULT_BASE, apply_rpe

_NORM_EPS = 1e-6
FULL_DEPTH = -1  # sentinel: recompute through every layer


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of the reference model.

    ``d_head`` defaults to ``d_model // n_heads``; it must be even because
    the rotary embedding rotates half-dimension pairs.
    """

    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int | None = None
    vocab_size: int = 256
    rpe_base: float = DEFAULT_BASE
    seed: int = 0

    def head_dim(self) -> int:
        return self.d_model // self.n_heads if self.d_head is None else self.d_head

    def validate(self):
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1:
            raise ConfigError("layer, head, and dimension counts must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        d_head = self.head_dim()
        if d_head % 2 != 0:
            raise ConfigError(f"d_head must be even for pairwise rotation, got {d_head}")
        if self.d_model != self.n_heads * d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads}) * d_head ({d_head})"
            )
        if self.rpe_base <= 0:
            raise ConfigError("rpe_base must be positive")


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embed: np.ndarray  # [vocab, d_model]
    unembed: np.ndarray  # [d_model, vocab]
    layers: tuple[LayerWeights, ...]

    def weight_bytes(self) -> bytes:
        parts = [self.embed.tobytes(), self.unembed.tobytes()]
        for lw in self.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_up, lw.w_down):
                parts.append(w.tobytes())
        return b"".join(parts)

    def logits(self, hidden_rows: np.ndarray) -> np.ndarray:
        return _rmsnorm(np.atleast_2d(hidden_rows)) @ self.unembed


def build_model(config: ModelConfig) -> Model:
    """Fill all weights from a seeded pseudorandom stream. Pure."""
    config.validate()
    d = config.d_model
    d_ff = 4 * d
    rng = np.random.default_rng(config.seed)
    embed = rng.standard_normal((config.vocab_size, d))
    unembed = rng.standard_normal((d, config.vocab_size)) / np.sqrt(d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=rng.standard_normal((d, d)) / np.sqrt(d),
                wk=rng.standard_normal((d, d)) / np.sqrt(d),
                wv=rng.standard_normal((d, d)) / np.sqrt(d),
                wo=rng.standard_normal((d, d)) / np.sqrt(d),
                w_up=rng.standard_normal((d, d_ff)) / np.sqrt(d),
                w_down=rng.standard_normal((d_ff, d)) / np.sqrt(d_ff),
            )
        )
    return Model(config=config, embed=embed, unembed=unembed, layers=tuple(layers))


def _rmsnorm(x):
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _NORM_EPS)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


@dataclass
class ChunkCache:
    """Per-layer key/value rows of one chunk, keys stored position-free.

    Pad rows (``n_slots - n_tokens`` of them) trail the real rows so payloads
    can be block-aligned; they are zero and excluded from attention.
    """

    keys: list[np.ndarray]  # per layer [n_slots, d_model]
    values: list[np.ndarray]
    n_tokens: int
    source_prefix: tuple = ()

    @property
    def n_slots(self) -> int:
        return self.keys[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def copy(self) -> "ChunkCache":
        return ChunkCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            n_tokens=self.n_tokens,
            source_prefix=self.source_prefix,
        )


@dataclass
class Segment:
    """One request segment: fresh text, or an injected chunk-cache.

    For injected segments, ``recompute`` flags the tokens whose query/key/
    value are recomputed, and ``recompute_depth`` optionally caps the layer
    range of that recomputation per token (``FULL_DEPTH`` = all layers).
    """

    tokens: np.ndarray
    cache: ChunkCache | None = None
    recompute: np.ndarray | None = None
    recompute_depth: np.ndarray | None = None


@dataclass
class PrefillRequest:
    """Resolved slot layout of one prefill call.

    Built via :func:`build_request`; the question segment is always fresh and
    fully recomputed (the final token's query produces the first decode
    token).
    """

    segments: list[Segment]
    question: np.ndarray
    token_ids: np.ndarray = field(init=False)
    positions: np.ndarray = field(init=False)
    is_pad: np.ndarray = field(init=False)
    recompute_mask: np.ndarray = field(init=False)
    recompute_depth: np.ndarray = field(init=False)
    question_span: tuple[int, int] = field(init=False)
    segment_slots: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        ids, pos, pad, mask, depth = [], [], [], [], []
        self.segment_slots = []
        cursor = 0
        position = 0
        for seg in self.segments:
            toks = np.asarray(seg.tokens, dtype=np.int64)
            if toks.size == 0:
                raise PlanError("empty segment")
            if seg.cache is None:
                if seg.recompute is not None or seg.recompute_depth is not None:
                    raise PlanError("fresh-text segments are always fully recomputed")
                n_slots = toks.size
                seg_mask = np.ones(n_slots, dtype=bool)
                seg_depth = np.full(n_slots, FULL_DEPTH, dtype=np.int64)
                seg_pad = np.zeros(n_slots, dtype=bool)
                seg_ids = toks
            else:
                if seg.cache.n_tokens != toks.size:
                    raise PlanError(
                        f"injected cache holds {seg.cache.n_tokens} tokens, "
                        f"segment declares {toks.size}"
                    )
                n_slots = seg.cache.n_slots
                n_pad = n_slots - toks.size
                seg_mask = np.zeros(n_slots, dtype=bool)
                if seg.recompute is not None:
                    rc = np.asarray(seg.recompute, dtype=bool)
                    if rc.shape != (toks.size,):
                        raise PlanError("recompute mask length != segment token count")
                    seg_mask[: toks.size] = rc
                seg_depth = np.full(n_slots, 0, dtype=np.int64)
                if seg.recompute_depth is not None:
                    dp = np.asarray(seg.recompute_depth, dtype=np.int64)
                    if dp.shape != (toks.size,):
                        raise PlanError("recompute depth length != segment token count")
                    seg_depth[: toks.size] = dp
                else:
                    seg_depth[: toks.size] = FULL_DEPTH
                seg_depth[: toks.size][~seg_mask[: toks.size]] = 0
                seg_ids = np.concatenate([toks, np.zeros(n_pad, dtype=np.int64)])
                seg_pad = np.zeros(n_slots, dtype=bool)
                seg_pad[toks.size :] = True
            seg_pos = np.full(n_slots, -1, dtype=np.int64)
            seg_pos[: toks.size] = position + np.arange(toks.size)
            position += toks.size
            ids.append(seg_ids)
            pos.append(seg_pos)
            pad.append(seg_pad)
            mask.append(seg_mask)
            depth.append(seg_depth)
            self.segment_slots.append((cursor, cursor + toks.size))
            cursor += n_slots

        q = np.asarray(self.question, dtype=np.int64)
        self.question_span = (cursor, cursor + q.size)
        if q.size:
            ids.append(q)
            pos.append(position + np.arange(q.size))
            pad.append(np.zeros(q.size, dtype=bool))
            mask.append(np.ones(q.size, dtype=bool))
            depth.append(np.full(q.size, FULL_DEPTH, dtype=np.int64))
        if not ids:
            raise PlanError("request has no tokens")
        self.token_ids = np.concatenate(ids)
        self.positions = np.concatenate(pos)
        self.is_pad = np.concatenate(pad)
        self.recompute_mask = np.concatenate(mask)
        self.recompute_depth = np.concatenate(depth)
        self.question = q

    @property
    def n_slots(self) -> int:
        return self.token_ids.size

    @property
    def n_tokens(self) -> int:
        return int(np.count_nonzero(~self.is_pad))


def build_request(segments, question) -> PrefillRequest:
    return PrefillRequest(segments=list(segments), question=np.asarray(question))


def plain_request(*token_groups) -> PrefillRequest:
    """All-fresh request; the last group is the question span."""
    groups = [np.asarray(g) for g in token_groups]
    if not groups:
        raise PlanError("need at least one token group")
    return build_request([Segment(tokens=g) for g in groups[:-1]], groups[-1])


@dataclass
class KVCache:
    """Merged per-layer KV of a processed request; keys position-free."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: np.ndarray
    valid: np.ndarray  # False at pad slots

    @property
    def n_slots(self) -> int:
        return self.positions.size

    def copy(self) -> "KVCache":
        return KVCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            positions=self.positions.copy(),
            valid=self.valid.copy(),
        )

    def append_token(self, per_layer_kv, position: int):
        for l, (k_row, v_row) in enumerate(per_layer_kv):
            self.keys[l] = np.vstack([self.keys[l], k_row])
            self.values[l] = np.vstack([self.values[l], v_row])
        self.positions = np.append(self.positions, position)
        self.valid = np.append(self.valid, True)

    def slice_rows(self, start: int, stop: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        keys = [k[start:stop].copy() for k in self.keys]
        values = [v[start:stop].copy() for v in self.values]
        return keys, values


@dataclass
class AttentionRecord:
    """Per-layer, per-head softmax weights for the rows that were computed."""

    weights: list[np.ndarray]  # per layer [n_heads, n_q, n_slots]
    query_slots: list[np.ndarray]  # per layer [n_q] global slot indices

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def head_mean(self, layer: int) -> np.ndarray:
        return self.weights[layer].mean(axis=0)

    def row_lookup(self, layer: int) -> dict[int, int]:
        return {int(s): r for r, s in enumerate(self.query_slots[layer])}


@dataclass
class PrefillResult:
    hidden: np.ndarray  # [n_slots, d_model]; zero where never computed to depth L
    kv: KVCache
    attn: AttentionRecord
    question_span: tuple[int, int]
    computed: np.ndarray  # rows whose hidden state reached the last layer
    active_per_layer: list[int]  # query-row count at each layer (work accounting)
    positions: np.ndarray


def prefill(model: Model, request: PrefillRequest, record_values: bool = False) -> PrefillResult:
    """Run (partial) prefill.

    Keys/values for recomputed tokens replace the stale injected rows in the
    returned cache (cache repair). With ``record_values`` the result gains a
    ``value_trace`` attribute (per-layer V and pre-projection attention
    context) for the block-identity checks.
    """
    cfg = model.config
    L, H = cfg.n_layers, cfg.n_heads
    d, dh = cfg.d_model, cfg.head_dim()
    n = request.n_slots

    for seg in request.segments:
        if seg.cache is not None:
            if seg.cache.n_layers != L:
                raise PlanError(f"injected cache has {seg.cache.n_layers} layers, model has {L}")
            if seg.cache.keys[0].shape[1] != d:
                raise ShapeError("injected cache width != d_model")

    mask = request.recompute_mask
    depth = np.where(request.recompute_depth == FULL_DEPTH, L, request.recompute_depth)
    positions = request.positions
    is_pad = request.is_pad

    hidden = np.zeros((n, d))
    hidden[mask] = model.embed[request.token_ids[mask]]

    kv_keys, kv_values = [], []
    attn_weights, attn_slots = [], []
    value_trace = [] if record_values else None
    active_per_layer = []
    key_pos = np.where(is_pad, 0, positions)  # pad rows are zero; any angle works

    for l in range(L):
        act = mask & (depth > l)
        act_idx = np.flatnonzero(act)
        active_per_layer.append(int(act_idx.size))

        K = np.zeros((n, d))
        V = np.zeros((n, d))
        for seg, (start, _) in zip(request.segments, request.segment_slots):
            if seg.cache is not None:
                stop = start + seg.cache.n_slots
                K[start:stop] = seg.cache.keys[l]
                V[start:stop] = seg.cache.values[l]

        if act_idx.size:
            x = hidden[act_idx]
            normed = _rmsnorm(x)
            lw = model.layers[l]
            q = normed @ lw.wq
            K[act_idx] = normed @ lw.wk
            V[act_idx] = normed @ lw.wv

            q_rot = apply_rpe(q, positions[act_idx], cfg.rpe_base, dh)
            k_rot = apply_rpe(K, key_pos, cfg.rpe_base, dh)

            qh = q_rot.reshape(-1, H, dh)
            kh = k_rot.reshape(n, H, dh)
            logits = np.einsum("qhd,khd->hqk", qh, kh) / np.sqrt(dh)
            allowed = (positions[None, :] <= positions[act_idx][:, None]) & ~is_pad[None, :]
            logits[:, ~allowed] = -np.inf
            logits -= logits.max(axis=2, keepdims=True)
            weights = np.exp(logits)
            weights /= weights.sum(axis=2, keepdims=True)

            vh = V.reshape(n, H, dh)
            ctx = np.einsum("hqk,khd->qhd", weights, vh).reshape(-1, d)
            hidden[act_idx] = x + ctx @ lw.wo
            x2 = hidden[act_idx]
            hidden[act_idx] = x2 + _gelu(_rmsnorm(x2) @ lw.w_up) @ lw.w_down
            attn_weights.append(weights)
            if record_values:
                value_trace.append((V.copy(), ctx.copy()))
        else:
            attn_weights.append(np.zeros((H, 0, n)))
            if record_values:
                value_trace.append((V.copy(), np.zeros((0, d))))
        attn_slots.append(act_idx)
        kv_keys.append(K)
        kv_values.append(V)

    result = PrefillResult(
        hidden=hidden,
        kv=KVCache(keys=kv_keys, values=kv_values, positions=positions.copy(), valid=~is_pad),
        attn=AttentionRecord(weights=attn_weights, query_slots=attn_slots),
        question_span=request.question_span,
        computed=mask & (depth >= L),
        active_per_layer=active_per_layer,
        positions=positions.copy(),
    )
    if record_values:
        result.value_trace = value_trace
    return result


def decode(model: Model, kv: KVCache, last_hidden: np.ndarray, max_steps: int) -> list[int]:
    """Greedy decode. Extends ``kv`` by one row per layer per step."""
    cfg = model.config
    H, dh, d = cfg.n_heads, cfg.head_dim(), cfg.d_model
    if max_steps <= 0:
        return []
    out = []
    hidden_row = np.asarray(last_hidden, dtype=np.float64).reshape(1, d)
    next_pos = int(kv.positions[kv.valid].max()) + 1
    for _ in range(max_steps):
        token = int(np.argmax(model.logits(hidden_row)[0]))
        out.append(token)
        x = model.embed[token][None, :]
        new_rows = []
        for l, lw in enumerate(model.layers):
            normed = _rmsnorm(x)
            q = normed @ lw.wq
            k_new = normed @ lw.wk
            v_new = normed @ lw.wv
            K = np.vstack([kv.keys[l], k_new])
            V = np.vstack([kv.values[l], v_new])
            key_pos = np.append(np.where(kv.valid, kv.positions, 0), next_pos)
            k_rot = apply_rpe(K, key_pos, cfg.rpe_base, dh)
            q_rot = apply_rpe(q, [next_pos], cfg.rpe_base, dh)
            logits = np.einsum(
                "qhd,khd->hqk", q_rot.reshape(1, H, dh), k_rot.reshape(-1, H, dh)
            ) / np.sqrt(dh)
            valid = np.append(kv.valid, True)
            logits[:, :, ~valid] = -np.inf
            logits -= logits.max(axis=2, keepdims=True)
            weights = np.exp(logits)
            weights /= weights.sum(axis=2, keepdims=True)
            ctx = np.einsum("hqk,khd->qhd", weights, V.reshape(-1, H, dh)).reshape(1, d)
            x = x + ctx @ lw.wo
            x = x + _gelu(_rmsnorm(x) @ lw.w_up) @ lw.w_down
            new_rows.append((k_new, v_new))
        kv.append_token(new_rows, next_pos)
        next_pos += 1
        hidden_row = x
    return out


def extract_chunk_cache(
    result: PrefillResult, start: int, stop: int, source_prefix: tuple = ()
) -> ChunkCache:
    """Cut one chunk's rows out of a prefill result as a reusable cache."""
    keys, values = result.kv.slice_rows(start, stop)
    return ChunkCache(keys=keys, values=values, n_tokens=stop - start, source_prefix=source_prefix)
