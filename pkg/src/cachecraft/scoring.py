"""Reusability scores for a chunk-cache variant against a new request.

beta: weighted prefix overlap. gamma: normalized Kendall-tau order penalty
on the common chunks. beta' = beta*(1-gamma). CCI = sigmoid(a_bar/b_bar).
CFO = clamp(alpha * CCI * (1 - beta'), 0, 1) is the fraction of the chunk's
tokens to recompute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ArgumentError, InfeasibleError


@dataclass(frozen=True)
class PrefixContext:
    """Ordered creation-time prefix of a cached chunk with its inter weights."""

    chunk_ids: tuple
    weights: tuple  # creation-time layer-summed inter totals, aligned with chunk_ids

    def __post_init__(self):
        if len(self.chunk_ids) != len(self.weights):
            raise ArgumentError("prefix ids and weights must align")
        if len(set(self.chunk_ids)) != len(self.chunk_ids):
            raise ArgumentError("prefix chunk ids must be unique")
        if any(w < 0 for w in self.weights):
            raise ArgumentError("inter weights must be non-negative")

    def weight_of(self, chunk_id) -> float:
        return self.weights[self.chunk_ids.index(chunk_id)]


@dataclass(frozen=True)
class ReuseScore:
    beta: float
    gamma: float
    beta_prime: float
    cci: float
    cfo: float


def beta(ctx: PrefixContext, new_prefix) -> float:
    """Weighted overlap of the old prefix with the new one.

    An empty or zero-weight old prefix scores 1: a never-contextualized
    cache is overlap-compatible with anything.
    """
    total = sum(ctx.weights)
    if not ctx.chunk_ids or total == 0:
        return 1.0
    new_set = set(new_prefix)
    kept = sum(w for cid, w in zip(ctx.chunk_ids, ctx.weights) if cid in new_set)
    return kept / total


def gamma(old_order, new_order) -> float:
    """Normalized discordant-pair count over the common chunk subset."""
    old_order, new_order = list(old_order), list(new_order)
    if len(set(old_order)) != len(old_order) or len(set(new_order)) != len(new_order):
        raise ArgumentError("orderings must not contain duplicate ids")
    common = set(old_order) & set(new_order)
    a = [cid for cid in old_order if cid in common]
    b = [cid for cid in new_order if cid in common]
    m = len(a)
    if m <= 1:
        return 0.0
    rank_b = {cid: r for r, cid in enumerate(b)}
    discordant = 0
    for x in range(m):
        for y in range(x + 1, m):
            if rank_b[a[x]] > rank_b[a[y]]:
                discordant += 1
    return discordant / (m * (m - 1) / 2)


def adjusted_beta(beta_val: float, gamma_val: float) -> float:
    if not (0.0 <= beta_val <= 1.0 and 0.0 <= gamma_val <= 1.0):
        raise ArgumentError(f"beta/gamma must lie in [0,1]: {beta_val}, {gamma_val}")
    return beta_val * (1.0 - gamma_val)


def cci(a_bar: float, b_bar: float) -> float:
    """Sigmoid of the outside/self contextualization ratio.

    b_bar = 0 (single-token or non-self-attending chunk) is read as the
    diverging-ratio limit: maximally context-dependent.
    """
    if a_bar < 0 or b_bar < 0:
        raise ArgumentError("context ratios must be non-negative")
    if b_bar == 0:
        return 1.0
    return 1.0 / (1.0 + math.exp(-a_bar / b_bar))


def cfo(alpha: float, cci_val: float, beta_prime: float) -> float:
    if alpha <= 0:
        raise ArgumentError(f"alpha must be positive, got {alpha}")
    if not (0.0 <= cci_val <= 1.0 and 0.0 <= beta_prime <= 1.0):
        raise ArgumentError("cci and beta_prime must lie in [0,1]")
    return min(1.0, max(0.0, alpha * cci_val * (1.0 - beta_prime)))


def score_variant(ctx: PrefixContext, cci_val: float, new_prefix, alpha: float) -> ReuseScore:
    """All five scores of one stored variant against a new prefix."""
    b = beta(ctx, new_prefix)
    g = gamma(ctx.chunk_ids, new_prefix)
    bp = adjusted_beta(b, g)
    return ReuseScore(beta=b, gamma=g, beta_prime=bp, cci=cci_val, cfo=cfo(alpha, cci_val, bp))


@dataclass
class CalibrationRow:
    alpha: float
    mean_cfo: float
    quality: float
    feasible: bool = field(init=False, default=False)


def evaluate_grid(candidates, evaluate) -> list[CalibrationRow]:
    """Run the evaluation callback over an alpha grid."""
    if not candidates:
        raise ArgumentError("alpha grid is empty")
    rows = []
    for alpha in candidates:
        mean_cfo, quality = evaluate(alpha)
        rows.append(CalibrationRow(alpha=alpha, mean_cfo=mean_cfo, quality=quality))
    return rows


def select_alpha(rows, quality_desired: float) -> float:
    """Among feasible rows, the alpha with minimal expected CFO."""
    best = None
    best_quality = None
    for row in rows:
        row.feasible = row.quality >= quality_desired
        if best_quality is None or row.quality > best_quality:
            best_quality = row.quality
        if row.feasible and (best is None or (row.mean_cfo, row.alpha) < (best.mean_cfo, best.alpha)):
            best = row
    if best is None:
        raise InfeasibleError(
            f"no alpha reaches quality {quality_desired}; best achieved {best_quality}",
            best_quality=best_quality,
        )
    return best.alpha


def calibrate_alpha(candidates, evaluate, quality_desired: float) -> float:
    return select_alpha(evaluate_grid(candidates, evaluate), quality_desired)
