"""Command-line entry points: trace generation, replay, alpha calibration,
and store census."""

from __future__ import annotations

import argparse
import sys

from .errors import CacheCraftError, InfeasibleError
from .harness import (
    calibration_evaluator,
    export_report,
    fit_zipf_skew,
    gen_synthetic,
    load_trace,
    replay,
    save_trace,
)
from .model import ModelConfig
from .scoring import evaluate_grid, select_alpha
from .serialize import read_model_config
from .store import StoreConfig, VariantStore
from .tiers import demo_tier_config


def _add_config_arg(parser):
    parser.add_argument("--config", help="model config file (key = value lines)")


def _model_config(args) -> ModelConfig:
    return read_model_config(args.config) if args.config else ModelConfig()


def _store_config(args) -> StoreConfig:
    return StoreConfig(max_chunks=args.store_chunks, variants_per_chunk=args.store_variants)


def _add_store_args(parser):
    parser.add_argument("--store-chunks", type=int, default=100, help="N: chunk baseline")
    parser.add_argument("--store-variants", type=int, default=5, help="M: variants per chunk")


def cmd_gen(args) -> int:
    if args.zipf is None:
        skew = fit_zipf_skew(args.chunks, args.k, args.requests, seed=args.seed)
    else:
        skew = args.zipf
    trace = gen_synthetic(
        n_chunks=args.chunks,
        zipf_s=skew,
        k=args.k,
        n_requests=args.requests,
        seed=args.seed,
    )
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} requests to {args.out} (zipf_s={skew:.4f})")
    return 0


def cmd_replay(args) -> int:
    trace = load_trace(args.trace)
    report = replay(
        trace,
        model_cfg=_model_config(args),
        store_cfg=_store_config(args),
        alpha=args.alpha,
        policy=args.policy,
        warmup=args.warmup,
    )
    fmt = "json" if str(args.out).endswith(".json") else "csv"
    export_report(report, args.out, fmt=fmt)
    agg = report.aggregate()
    print(
        f"{args.policy}: {agg['n_requests']} steady-state requests, "
        f"recompute_fraction={agg['recompute_fraction']:.3f}, "
        f"hit_rate={agg['hit_rate']:.3f}, mean_deviation={agg['mean_deviation']:.5f}, "
        f"mean_ttft={agg['mean_ttft']:.4f}s"
    )
    print(f"report written to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    trace = load_trace(args.trace)
    grid = [float(a) for a in args.grid.split(",") if a.strip()]
    evaluate = calibration_evaluator(
        trace, model_cfg=_model_config(args), store_cfg=_store_config(args), warmup=args.warmup
    )
    rows = evaluate_grid(grid, evaluate)
    lines = ["alpha,mean_cfo,quality,feasible"]
    try:
        best = select_alpha(rows, args.target)
        status = f"alpha* = {best}"
        code = 0
    except InfeasibleError as exc:
        best = None
        status = f"infeasible: {exc}"
        code = 1
    for row in rows:
        lines.append(f"{row.alpha:.6g},{row.mean_cfo:.6g},{row.quality:.6g},{int(row.feasible)}")
    output = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(output + "\n")
    else:
        print(output)
    print(status)
    return code


def cmd_census(args) -> int:
    store = VariantStore.load_snapshot(args.store)
    census = store.census()
    print("chunk_id,variants")
    for cid, count in sorted(census.items(), key=lambda kv: (-kv[1], kv[0])):
        print(f"{cid},{count}")
    histogram = {}
    for count in census.values():
        histogram[count] = histogram.get(count, 0) + 1
    print(f"# {len(census)} chunks, {len(store)} variants", file=sys.stderr)
    for count in sorted(histogram):
        print(f"# {histogram[count]} chunk(s) with {count} variant(s)", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cachecraft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic Zipf trace")
    p.add_argument("--chunks", type=int, required=True)
    p.add_argument("--zipf", type=float, default=None, help="skew; omit to fit the top-5%%=60%% shape")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--requests", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("replay", help="replay a trace under a policy")
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", default="cachecraft")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--out", required=True)
    _add_config_arg(p)
    _add_store_args(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("calibrate", help="sweep alpha against a quality target")
    p.add_argument("--trace", required=True)
    p.add_argument("--grid", default="0.5,1,2,3")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--out", default=None, help="CSV path; defaults to stdout")
    _add_config_arg(p)
    _add_store_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("census", help="variant histogram of a store snapshot")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_census)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CacheCraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
