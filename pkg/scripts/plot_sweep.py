#!/usr/bin/env python3
"""Terminal chart of a finished sweep.

Reads sweep_metrics.csv from a sweep output directory and prints attack
success and parameter cost per encoder subset, cheapest first, marking the
minimal effective subset.

Usage:
    python3 scripts/plot_sweep.py --out runs/study [--eps 0.05]
"""
import argparse
import os

from meltlab.evaluation import SubsetId, find_minimal_effective, read_metrics_csv

BAR = 46


def run(args) -> None:
    path = os.path.join(args.out, "sweep_metrics.csv")
    rows = read_metrics_csv(path)
    attacked = {r.subset_mask: r for r in rows if r.mode in ("full", "lora")}
    if not attacked:
        raise SystemExit(f"{path} has no attacked rows")
    baseline = next((r for r in rows if r.mode == "none"), None)
    order = sorted((SubsetId.from_mask(m) for m in attacked),
                   key=lambda s: (attacked[s.mask].params, len(s.indices), s.indices))
    star = find_minimal_effective(order, {m: r.asr for m, r in attacked.items()}, args.eps)
    full = attacked["1" * order[0].n]

    print(f"{path}: {len(attacked)} subsets, eps={args.eps}")
    if baseline is not None:
        print(f"clean baseline: asr={baseline.asr:.3f} aln_clean={baseline.aln_clean:.3f} "
              f"fid2={baseline.fid2:.4f}")
    print(f"full-set asr: {full.asr:.3f}\n")
    print(f"{'subset':>7} {'params':>9} {'pct':>6}  asr")
    for s in order:
        r = attacked[s.mask]
        bar = "#" * round(BAR * r.asr)
        mark = "  <- S*" if s.mask == star.mask else ""
        print(f"S{s.mask:>6} {r.params:>9} {r.params_pct:>5.1f}%  "
              f"{r.asr:5.3f} |{bar:<{BAR}}|{mark}")
    strict = star.mask.count("1") < order[0].n
    print(f"\nminimal effective subset: S{star.mask} "
          f"({'strict subset' if strict else 'the full set'})")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/study", help="sweep output directory")
    ap.add_argument("--eps", type=float, default=0.05, help="search tolerance")
    run(ap.parse_args())
