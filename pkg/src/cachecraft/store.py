"""Metadata store and variant manager: content-hashed lookup, N*M capacity,
frequency-reuse accounting, lowest-f_r eviction, block-aligned payloads."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, IoError, NotFoundError
from .model import ChunkCache
from .scoring import PrefixContext
from .serialize import read_kv_container, write_kv_container

BLOCK_SIZE = 16
FR_EPSILON = 0.01  # floor for 1/CFO; an exact-prefix hit would otherwise diverge


def chunk_hash(token_ids) -> str:
    """Stable digest of a chunk's raw token ids, computed before padding."""
    toks = np.asarray(token_ids, dtype=np.int64)
    if toks.size == 0:
        raise ArgumentError("cannot hash an empty chunk")
    return hashlib.blake2b(toks.tobytes(), digest_size=8).hexdigest()


def pad_to_blocks(cache: ChunkCache, block_size: int = BLOCK_SIZE) -> tuple[ChunkCache, int]:
    """Zero-pad the payload rows up to the next block multiple.

    Returns the padded cache and the pad count; attention masks exclude the
    pad slots, so padding never alters the output.
    """
    if block_size < 1:
        raise ArgumentError("block size must be positive")
    n = cache.n_slots
    if n == 0:
        raise ArgumentError("cannot pad an empty payload")
    padded_rows = ((n + block_size - 1) // block_size) * block_size
    pad = padded_rows - n
    if pad == 0:
        return cache, 0
    d = cache.keys[0].shape[1]
    zeros = np.zeros((pad, d))
    padded = ChunkCache(
        keys=[np.vstack([k, zeros]) for k in cache.keys],
        values=[np.vstack([v, zeros]) for v in cache.values],
        n_tokens=cache.n_tokens,
        source_prefix=cache.source_prefix,
    )
    return padded, pad


@dataclass
class Variant:
    variant_id: int
    chunk_id: str
    prefix: PrefixContext
    a_bar: float
    b_bar: float
    cci: float
    token_scores: np.ndarray
    cache: ChunkCache
    f_r: float = 0.0
    created_at: int = 0

    def payload_bytes(self) -> int:
        # f32 wire accounting: K and V rows across all layers
        n_layers = self.cache.n_layers
        rows, d = self.cache.keys[0].shape
        return n_layers * rows * d * 2 * 4


@dataclass
class StoreConfig:
    max_chunks: int = 100  # N
    variants_per_chunk: int = 5  # M
    block_size: int = BLOCK_SIZE
    eviction_batch: int = 1

    @property
    def capacity(self) -> int:
        return self.max_chunks * self.variants_per_chunk

    def validate(self):
        if self.capacity < 1:
            raise ConfigError("store capacity must be at least 1")
        if self.block_size < 1 or self.eviction_batch < 1:
            raise ConfigError("block size and eviction batch must be positive")


class VariantStore:
    """Single-writer variant store; capacity is N*M total variants with
    flexible allocation across chunks. Inserting past capacity evicts the
    lowest-f_r variants inline (ties: oldest first)."""

    def __init__(self, config: StoreConfig | None = None):
        self.config = config or StoreConfig()
        self.config.validate()
        self._by_chunk: dict[str, list[Variant]] = {}
        self._by_id: dict[int, Variant] = {}
        self._next_id = 1
        self._clock = 0

    def __len__(self) -> int:
        return len(self._by_id)

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def insert(self, chunk_id, *, prefix, a_bar, b_bar, cci, token_scores, cache) -> int:
        """Store a variant (f_r = 0). An identical (chunk, prefix) pair is
        replaced in place: freshest stats win, f_r and age are kept."""
        cache, _ = pad_to_blocks(cache, self.config.block_size)
        now = self._tick()
        for existing in self._by_chunk.get(chunk_id, []):
            if existing.prefix.chunk_ids == tuple(prefix.chunk_ids):
                existing.prefix = prefix
                existing.a_bar, existing.b_bar, existing.cci = a_bar, b_bar, cci
                existing.token_scores = np.asarray(token_scores, dtype=np.float64)
                existing.cache = cache
                return existing.variant_id
        variant = Variant(
            variant_id=self._next_id,
            chunk_id=chunk_id,
            prefix=prefix,
            a_bar=a_bar,
            b_bar=b_bar,
            cci=cci,
            token_scores=np.asarray(token_scores, dtype=np.float64),
            cache=cache,
            created_at=now,
        )
        self._next_id += 1
        self._by_chunk.setdefault(chunk_id, []).append(variant)
        self._by_id[variant.variant_id] = variant
        overflow = len(self._by_id) - self.config.capacity
        if overflow > 0:
            self.evict(max(overflow, self.config.eviction_batch))
        return variant.variant_id

    def lookup(self, chunk_id) -> list[Variant]:
        return list(self._by_chunk.get(chunk_id, []))

    def get(self, variant_id: int) -> Variant:
        try:
            return self._by_id[variant_id]
        except KeyError:
            raise NotFoundError(f"variant {variant_id} is not live") from None

    def touch(self, variant_id: int, cfo_val: float) -> float:
        variant = self.get(variant_id)
        variant.f_r += 1.0 / max(cfo_val, FR_EPSILON)
        self._tick()
        return variant.f_r

    def evict(self, count: int) -> list[int]:
        """Drop the ``count`` variants with globally smallest f_r."""
        if count < 1:
            raise ArgumentError("eviction count must be >= 1")
        victims = sorted(
            self._by_id.values(), key=lambda v: (v.f_r, v.created_at, v.variant_id)
        )[:count]
        evicted = []
        for victim in victims:
            self._by_id.pop(victim.variant_id)
            siblings = self._by_chunk[victim.chunk_id]
            siblings.remove(victim)
            if not siblings:
                del self._by_chunk[victim.chunk_id]
            evicted.append(victim.variant_id)
        if evicted:
            self._tick()
        return evicted

    def variants(self) -> list[Variant]:
        return sorted(self._by_id.values(), key=lambda v: v.variant_id)

    def census(self) -> dict[str, int]:
        """Chunk id -> live variant count (the chunks-by-variants histogram)."""
        return {cid: len(vs) for cid, vs in self._by_chunk.items() if vs}

    # -- snapshots ---------------------------------------------------------

    def snapshot(self, directory):
        os.makedirs(directory, exist_ok=True)
        manifest = {
            "config": {
                "max_chunks": self.config.max_chunks,
                "variants_per_chunk": self.config.variants_per_chunk,
                "block_size": self.config.block_size,
                "eviction_batch": self.config.eviction_batch,
            },
            "next_id": self._next_id,
            "clock": self._clock,
            "variants": [],
        }
        for variant in self.variants():
            payload_file = f"variant_{variant.variant_id}.kv"
            write_kv_container(
                os.path.join(directory, payload_file), variant.cache.keys, variant.cache.values
            )
            manifest["variants"].append(
                {
                    "variant_id": variant.variant_id,
                    "chunk_id": variant.chunk_id,
                    "prefix_ids": list(variant.prefix.chunk_ids),
                    "prefix_weights": [float(w) for w in variant.prefix.weights],
                    "a_bar": variant.a_bar,
                    "b_bar": variant.b_bar,
                    "cci": variant.cci,
                    "token_scores": [float(s) for s in variant.token_scores],
                    "f_r": variant.f_r,
                    "created_at": variant.created_at,
                    "n_tokens": variant.cache.n_tokens,
                    "payload": payload_file,
                }
            )
        try:
            with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2)
        except OSError as exc:
            raise IoError(f"cannot write snapshot manifest: {exc}") from exc

    @classmethod
    def load_snapshot(cls, directory) -> "VariantStore":
        try:
            with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read snapshot manifest: {exc}") from exc
        store = cls(StoreConfig(**manifest["config"]))
        store._next_id = manifest["next_id"]
        store._clock = manifest["clock"]
        for item in manifest["variants"]:
            keys, values = read_kv_container(os.path.join(directory, item["payload"]))
            cache = ChunkCache(
                keys=keys,
                values=values,
                n_tokens=item["n_tokens"],
                source_prefix=tuple(item["prefix_ids"]),
            )
            variant = Variant(
                variant_id=item["variant_id"],
                chunk_id=item["chunk_id"],
                prefix=PrefixContext(
                    chunk_ids=tuple(item["prefix_ids"]),
                    weights=tuple(item["prefix_weights"]),
                ),
                a_bar=item["a_bar"],
                b_bar=item["b_bar"],
                cci=item["cci"],
                token_scores=np.asarray(item["token_scores"], dtype=np.float64),
                cache=cache,
                f_r=item["f_r"],
                created_at=item["created_at"],
            )
            store._by_chunk.setdefault(variant.chunk_id, []).append(variant)
            store._by_id[variant.variant_id] = variant
        return store
