import json

import numpy as np
import pytest

from cachecraft import (
    ArgumentError,
    PlacementError,
    PlanError,
    fallback_decision,
    place_and_migrate,
    preload_depth,
    simulate,
    timeline_to_csv,
)
from cachecraft.planner import HIT, MISS, ChunkPlan, InferencePlan
from cachecraft.tiers import Tier, TierConfig


def hit_chunk(vid, n_slots=32, recompute=0, depth=None, cid=None):
    return ChunkPlan(
        chunk_id=cid or f"c{vid}",
        status=HIT,
        tokens=None,
        n_tokens=n_slots,
        n_slots=n_slots,
        variant_id=vid,
        cfo=0.0,
        recompute=np.arange(recompute, dtype=np.int64),
        recompute_depth=depth,
    )


def miss_chunk(n_tokens=32, cid="m"):
    return ChunkPlan(
        chunk_id=cid, status=MISS, tokens=None, n_tokens=n_tokens, n_slots=n_tokens
    )


def plan_of(*chunks, question=8):
    return InferencePlan(
        chunks=list(chunks), question=np.zeros(question, dtype=np.int64), alpha=1.0
    )


def uniform_cfg(n_layers, load_ratio, n_slots=32, t_prefill=0.01, **kw):
    """Single tier sized so one hit chunk loads in load_ratio * t_prefill per layer."""
    bw = n_slots * 512.0 / (load_ratio * t_prefill)
    return TierConfig(
        tiers=(Tier(name="t", bandwidth=bw, latency=0.0),),
        n_layers=n_layers,
        t_prefill_layer=t_prefill,
        bytes_per_token_layer=512.0,
        **kw,
    )


class TestPreloadDepth:
    def test_paper_ratio_one_to_two(self):
        assert preload_depth(5, 1.0, 2.0) == 3

    def test_fast_load_needs_single_layer(self):
        assert preload_depth(5, 2.0, 1.0) == 1
        assert preload_depth(5, 1.0, 1.0) == 1

    def test_infinitely_slow_load_preloads_everything(self):
        assert preload_depth(6, 1.0, 1e12) == 6

    def test_clamped_to_layer_count(self):
        assert preload_depth(1, 1.0, 100.0) == 1

    def test_nonpositive_times_rejected(self):
        with pytest.raises(ArgumentError):
            preload_depth(4, 0.0, 1.0)
        with pytest.raises(ArgumentError):
            preload_depth(4, 1.0, -2.0)


class TestSimulate:
    def test_no_loads_means_no_gaps_and_clean_ttft(self):
        cfg = uniform_cfg(4, 1.0, t_decode_step=0.02)
        plan = plan_of(miss_chunk())
        tl = simulate(plan, {}, cfg, queue_wait=0.5)
        assert tl.total_gap == 0.0
        assert tl.ttft == pytest.approx(0.5 + 4 * 0.01 + 0.02)

    def test_formula_depth_eliminates_gaps(self):
        cfg = uniform_cfg(5, 2.0)
        plan = plan_of(hit_chunk(1))
        tl = simulate(plan, {1: "t"}, cfg, queue_wait=0.0, depth=3)
        assert tl.total_gap == 0.0

    def test_shallower_depth_leaves_gaps(self):
        cfg = uniform_cfg(5, 2.0)
        plan = plan_of(hit_chunk(1))
        tl = simulate(plan, {1: "t"}, cfg, queue_wait=0.0, depth=2)
        assert tl.total_gap > 0.0

    def test_queue_wait_masks_loads(self):
        # auto depth buffers enough layers during the wait to hide all loads
        cfg = uniform_cfg(5, 2.0)
        plan = plan_of(hit_chunk(1))
        tl = simulate(plan, {1: "t"}, cfg, queue_wait=10.0)
        assert tl.total_gap == 0.0
        assert tl.layers[0].compute_start == 10.0
        assert tl.ttft == pytest.approx(10.0 + 5 * 0.01)

    def test_missing_placement_rejected(self):
        cfg = uniform_cfg(4, 1.0)
        with pytest.raises(PlanError):
            simulate(plan_of(hit_chunk(1)), {}, cfg, queue_wait=0.0)

    def test_work_conservation(self):
        cfg = uniform_cfg(6, 1.5, t_compute_per_token=1e-4)
        plan = plan_of(hit_chunk(1, recompute=8), miss_chunk())
        tl = simulate(plan, {1: "t"}, cfg, queue_wait=0.1)
        for a, b in zip(tl.layers, tl.layers[1:]):
            assert b.compute_start >= a.compute_end - 1e-12
            assert a.compute_end > a.compute_start

    def test_recompute_depth_shrinks_late_layer_compute(self):
        cfg = uniform_cfg(4, 0.5, t_compute_per_token=1e-3)
        capped = plan_of(hit_chunk(1, recompute=10, depth=2))
        full = plan_of(hit_chunk(1, recompute=10))
        t_capped = simulate(capped, {1: "t"}, cfg, queue_wait=0.0)
        t_full = simulate(full, {1: "t"}, cfg, queue_wait=0.0)
        assert t_capped.ttft < t_full.ttft

    def test_ttft_monotone_in_tier_speed(self):
        slow_first = TierConfig(
            tiers=(
                Tier(name="fast", bandwidth=1e12),
                Tier(name="slow", bandwidth=1e4),
            ),
            n_layers=4,
            t_prefill_layer=0.01,
        )
        plan = plan_of(hit_chunk(1), hit_chunk(2))
        base = simulate(plan, {1: "slow", 2: "slow"}, slow_first, queue_wait=0.0)
        moved = simulate(plan, {1: "fast", 2: "slow"}, slow_first, queue_wait=0.0)
        assert moved.ttft <= base.ttft + 1e-12


class TestTimelineExport:
    def test_json_and_csv_agree(self, tmp_path):
        cfg = uniform_cfg(3, 2.0)
        tl = simulate(plan_of(hit_chunk(1)), {1: "t"}, cfg, queue_wait=0.0)
        payload = json.loads(tl.to_json())
        assert len(payload["layers"]) == 3
        assert payload["ttft"] == pytest.approx(tl.ttft)
        path = tmp_path / "gantt.csv"
        timeline_to_csv(tl, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "layer,load_start,load_end,compute_start,compute_end"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert int(first[0]) == 1
        assert float(first[3]) == pytest.approx(tl.layers[0].compute_start)


class FakeVariant:
    def __init__(self, vid, f_r, created_at, nbytes):
        self.variant_id = vid
        self.f_r = f_r
        self.created_at = created_at
        self._bytes = nbytes

    def payload_bytes(self):
        return self._bytes


def tier_cfg_with_budgets(fast_cap=None, mid_cap=None):
    return TierConfig(
        tiers=(
            Tier(name="fast", bandwidth=1e12, capacity_bytes=fast_cap, placement_fraction=0.34),
            Tier(name="medium", bandwidth=1e9, capacity_bytes=mid_cap, placement_fraction=0.34),
            Tier(name="slow", bandwidth=1e6),
        ),
        n_layers=4,
        t_prefill_layer=0.01,
    )


class TestPlacement:
    def test_everything_fits_in_fast_when_unbounded(self):
        cfg = TierConfig(
            tiers=(Tier(name="fast", bandwidth=1e12),), n_layers=4, t_prefill_layer=0.01
        )
        variants = [FakeVariant(i, float(i), i, 100) for i in range(5)]
        placement = place_and_migrate(variants, cfg)
        assert set(placement.values()) == {"fast"}

    def test_skewed_f_r_fills_bands_in_rank_order(self):
        cfg = tier_cfg_with_budgets()
        variants = [FakeVariant(i, float(i), i, 100) for i in range(6)]
        placement = place_and_migrate(variants, cfg)
        # sort oracle: ids 5,4 -> fast (floor(0.34*6)=2), 3,2 -> medium, rest slow
        assert placement[5] == placement[4] == "fast"
        assert placement[3] == placement[2] == "medium"
        assert placement[1] == placement[0] == "slow"

    def test_uniform_f_r_tie_breaks_to_older_under_tight_budget(self):
        cfg = tier_cfg_with_budgets(fast_cap=250)
        variants = [FakeVariant(i, 1.0, created_at=i, nbytes=100) for i in range(6)]
        placement = place_and_migrate(variants, cfg)
        fast = [vid for vid, tier in placement.items() if tier == "fast"]
        assert sorted(fast) == [0, 1]

    def test_budget_overflow_spills_to_next_tier(self):
        cfg = tier_cfg_with_budgets(fast_cap=150)
        variants = [FakeVariant(i, float(6 - i), i, 100) for i in range(6)]
        placement = place_and_migrate(variants, cfg)
        assert sum(1 for t in placement.values() if t == "fast") == 1

    def test_oversized_variant_rejected(self):
        cfg = tier_cfg_with_budgets(fast_cap=50)
        with pytest.raises(PlacementError):
            place_and_migrate([FakeVariant(1, 1.0, 0, 100)], cfg)


class TestFallback:
    def cfg(self):
        return TierConfig(
            tiers=(
                Tier(name="fast", bandwidth=1e12),
                Tier(name="slow", bandwidth=2e5, latency=0.05),
            ),
            n_layers=4,
            t_prefill_layer=0.01,
            t_compute_per_token=1e-4,
        )

    def test_fast_tier_variant_never_demoted(self):
        plan = plan_of(hit_chunk(1))
        out = fallback_decision(plan, {1: "fast"}, self.cfg(), queue_wait=0.0)
        assert out.chunks[0].status == HIT

    def test_slow_huge_payload_tiny_chunk_demoted(self):
        # payload is block-padded far beyond the chunk's 4 real tokens
        chunk = hit_chunk(1, n_slots=128)
        chunk.n_tokens = 4
        out = fallback_decision(plan_of(chunk), {1: "slow"}, self.cfg(), queue_wait=0.0)
        assert out.chunks[0].status == MISS
        assert out.chunks[0].variant_id is None

    def test_long_queue_hides_slow_loads(self):
        chunk = hit_chunk(1, n_slots=128)
        chunk.n_tokens = 4
        out = fallback_decision(plan_of(chunk), {1: "slow"}, self.cfg(), queue_wait=60.0)
        assert out.chunks[0].status == HIT
