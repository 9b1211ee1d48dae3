"""Discrete-event model of hierarchical cache placement and layer-wise
preloading.

Loads start at enqueue time and serialize on a single channel in layer
order. Compute of layer 1 waits for the queue and for the first
``depth`` loads (the preload burst); afterwards layer l starts at
max(previous compute end, its own load end), and the read buffer lets load
j begin once compute of layer j-depth has started. Under uniform per-layer
times this makes ceil((L-1)(1-Tp/Tl)+1) exactly the smallest depth with no
execution gaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

from .errors import ArgumentError, PlacementError, PlanError
from .planner import HIT, MISS, InferencePlan

GAP_EPS = 1e-9  # float-accumulation tolerance when summing idle time
DEFAULT_QUEUE_WAIT = 0.32  # typical queue wait, seconds


@dataclass(frozen=True)
class Tier:
    name: str
    bandwidth: float  # bytes/s
    latency: float = 0.0  # fixed seconds per load operation
    capacity_bytes: float | None = None
    placement_fraction: float | None = None  # share of variants targeted, by f_r rank


@dataclass(frozen=True)
class TierConfig:
    tiers: tuple[Tier, ...]  # ordered fast -> slow
    n_layers: int
    t_prefill_layer: float
    t_decode_step: float = 0.0
    t_compute_per_token: float = 0.0
    bytes_per_token_layer: float = 512.0

    def validate(self):
        if not self.tiers:
            raise ArgumentError("need at least one tier")
        for tier in self.tiers:
            if tier.bandwidth <= 0:
                raise ArgumentError(f"tier {tier.name} bandwidth must be positive")
            if tier.latency < 0:
                raise ArgumentError(f"tier {tier.name} latency must be non-negative")
        if self.n_layers < 1 or self.t_prefill_layer <= 0:
            raise ArgumentError("layer count and per-layer prefill time must be positive")

    def tier(self, name: str) -> Tier:
        for tier in self.tiers:
            if tier.name == name:
                return tier
        raise ArgumentError(f"unknown tier {name!r}")


def preload_depth(n_layers: int, t_prefill: float, t_load: float) -> int:
    """Smallest layer count to fetch ahead so computation never stalls."""
    if n_layers < 1:
        raise ArgumentError("layer count must be >= 1")
    if t_prefill <= 0 or t_load <= 0:
        raise ArgumentError("per-layer times must be positive")
    raw = (n_layers - 1) * (1.0 - t_prefill / t_load) + 1.0
    depth = max(1, math.ceil(raw - 1e-9))
    return min(depth, n_layers)


@dataclass
class LayerInterval:
    load_start: float
    load_end: float
    compute_start: float
    compute_end: float


@dataclass
class Timeline:
    queue_wait: float
    layers: list[LayerInterval]
    ttft: float
    total_gap: float
    depth: int

    def gantt_rows(self):
        return [
            (i + 1, li.load_start, li.load_end, li.compute_start, li.compute_end)
            for i, li in enumerate(self.layers)
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "queue_wait": self.queue_wait,
                "ttft": self.ttft,
                "total_gap": self.total_gap,
                "depth": self.depth,
                "layers": [
                    {
                        "layer": i + 1,
                        "load_start": li.load_start,
                        "load_end": li.load_end,
                        "compute_start": li.compute_start,
                        "compute_end": li.compute_end,
                    }
                    for i, li in enumerate(self.layers)
                ],
            },
            indent=2,
        )


def timeline_to_csv(timeline: Timeline, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,load_start,load_end,compute_start,compute_end\n")
        for row in timeline.gantt_rows():
            fh.write(f"{row[0]},{row[1]:.9f},{row[2]:.9f},{row[3]:.9f},{row[4]:.9f}\n")


def _per_layer_times(plan: InferencePlan, placement, cfg: TierConfig):
    load = [0.0] * cfg.n_layers
    fresh_tokens = int(plan.question.size) + sum(
        cp.n_tokens for cp in plan.chunks if cp.status == MISS
    )
    comp = []
    for cp in plan.chunks:
        if cp.status != HIT:
            continue
        if cp.variant_id not in placement:
            raise PlanError(f"no tier placement for variant {cp.variant_id}")
        tier = cfg.tier(placement[cp.variant_id])
        seconds = cp.n_slots * cfg.bytes_per_token_layer / tier.bandwidth + tier.latency
        for l in range(cfg.n_layers):
            load[l] += seconds
    for l in range(1, cfg.n_layers + 1):
        active = fresh_tokens
        for cp in plan.chunks:
            if cp.status == HIT and cp.recompute is not None and cp.recompute.size:
                depth = cfg.n_layers if cp.recompute_depth is None else cp.recompute_depth
                if l <= depth:
                    active += int(cp.recompute.size)
        comp.append(cfg.t_prefill_layer + cfg.t_compute_per_token * active)
    return load, comp


def simulate(
    plan: InferencePlan,
    placement: dict,
    cfg: TierConfig,
    queue_wait: float = DEFAULT_QUEUE_WAIT,
    depth: int | None = None,
) -> Timeline:
    """Schedule one request's loads and per-layer computes; loads overlap the
    queue wait (asynchronous preloading)."""
    cfg.validate()
    if queue_wait < 0:
        raise ArgumentError("queue wait must be non-negative")
    L = cfg.n_layers
    load, comp = _per_layer_times(plan, placement, cfg)
    if depth is None:
        total_load = sum(load)
        if total_load <= 0:
            depth = 1
        else:
            depth = preload_depth(L, sum(comp) / L, total_load / L)
    if not 1 <= depth <= L:
        raise ArgumentError(f"preload depth must lie in [1, {L}], got {depth}")

    load_start = [0.0] * L
    load_end = [0.0] * L
    cs = [0.0] * L
    ce = [0.0] * L

    prev = 0.0
    burst = min(depth, L)
    for i in range(burst):
        load_start[i] = prev
        load_end[i] = prev + load[i]
        prev = load_end[i]

    cs[0] = max(queue_wait, load_end[burst - 1])
    ce[0] = cs[0] + comp[0]
    for i in range(1, L):
        if i >= burst:
            load_start[i] = max(prev, cs[i - depth])
            load_end[i] = load_start[i] + load[i]
            prev = load_end[i]
        cs[i] = max(ce[i - 1], load_end[i], queue_wait)
        ce[i] = cs[i] + comp[i]

    total_gap = 0.0
    for i in range(1, L):
        gap = cs[i] - ce[i - 1]
        if gap > GAP_EPS:
            total_gap += gap
    layers = [
        LayerInterval(load_start[i], load_end[i], cs[i], ce[i]) for i in range(L)
    ]
    return Timeline(
        queue_wait=queue_wait,
        layers=layers,
        ttft=ce[L - 1] + cfg.t_decode_step,
        total_gap=total_gap,
        depth=depth,
    )


def place_and_migrate(variants, cfg: TierConfig) -> dict:
    """Partition variants into tiers by f_r rank bands, respecting byte
    budgets (spill to the next slower tier when a band is full)."""
    cfg.validate()
    variants = sorted(variants, key=lambda v: (-v.f_r, v.created_at, v.variant_id))
    if not variants:
        return {}
    fast = cfg.tiers[0]
    largest = max(v.payload_bytes() for v in variants)
    if fast.capacity_bytes is not None and largest > fast.capacity_bytes:
        raise PlacementError(
            f"fast tier budget {fast.capacity_bytes} cannot hold the largest variant ({largest} bytes)"
        )

    n = len(variants)
    targets = []
    assigned = 0
    for idx, tier in enumerate(cfg.tiers):
        if idx == len(cfg.tiers) - 1 or tier.placement_fraction is None:
            targets.append(n - assigned)
            assigned = n
        else:
            count = min(n - assigned, int(math.floor(tier.placement_fraction * n)))
            targets.append(count)
            assigned += count
    if assigned < n:
        targets[-1] += n - assigned

    placement = {}
    used = [0.0] * len(cfg.tiers)
    band_of = []
    for band, count in enumerate(targets):
        band_of.extend([band] * count)
    for variant, band in zip(variants, band_of):
        placed = False
        for idx in range(band, len(cfg.tiers)):
            tier = cfg.tiers[idx]
            size = variant.payload_bytes()
            if tier.capacity_bytes is None or used[idx] + size <= tier.capacity_bytes:
                placement[variant.variant_id] = tier.name
                used[idx] += size
                placed = True
                break
        if not placed:
            raise PlacementError(f"no tier has room for variant {variant.variant_id}")
    return placement


def fallback_decision(
    plan: InferencePlan,
    placement: dict,
    cfg: TierConfig,
    queue_wait: float = DEFAULT_QUEUE_WAIT,
    depth: int | None = None,
) -> InferencePlan:
    """Demote cache hits whose loads cost more than computing fresh.

    Each hit chunk is re-simulated with and without its variant; the variant
    is dropped only on a strict TTFT improvement (loads fully hidden by the
    queue or by compute never demote).
    """
    current = plan
    for i, cp in enumerate(plan.chunks):
        if cp.status != HIT:
            continue
        with_ttft = simulate(current, placement, cfg, queue_wait, depth).ttft
        demoted_chunks = list(current.chunks)
        demoted_chunks[i] = replace(
            cp,
            status=MISS,
            variant_id=None,
            cfo=1.0,
            recompute=None,
            recompute_depth=None,
            score=None,
            cache=None,
            n_slots=cp.n_tokens,
        )
        candidate = InferencePlan(
            chunks=demoted_chunks,
            question=current.question,
            alpha=current.alpha,
            focus_window=current.focus_window,
        )
        without_ttft = simulate(candidate, placement, cfg, queue_wait, depth).ttft
        if without_ttft + 1e-12 < with_ttft:
            current = candidate
    return current


def demo_tier_config(n_layers: int = 4, d_model: int = 64) -> TierConfig:
    """Three-tier demo constants sized so a typical 5-chunk request loads in
    ~0.03 s from the medium tier and ~0.59 s from the slow tier."""
    bytes_per_token_layer = d_model * 2 * 4
    request_bytes = 5 * 32 * bytes_per_token_layer * n_layers
    return TierConfig(
        tiers=(
            Tier(name="fast", bandwidth=1e12, latency=0.0, placement_fraction=0.2),
            Tier(name="medium", bandwidth=request_bytes / 0.03, latency=0.0, placement_fraction=0.4),
            Tier(name="slow", bandwidth=request_bytes / 0.59, latency=0.0),
        ),
        n_layers=n_layers,
        t_prefill_layer=0.01,
        t_decode_step=0.01,
        t_compute_per_token=2e-4,
        bytes_per_token_layer=bytes_per_token_layer,
    )
