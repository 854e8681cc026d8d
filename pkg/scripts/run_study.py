#!/usr/bin/env python3
"""End-to-end study driver.

Runs the whole protocol into one output directory:

    1. pretrain the clean pipeline (stage-0)
    2. attack the full encoder set, full fine-tune, and evaluate it
    3. attack the full encoder set with low-rank adapters, and evaluate it
    4. sweep every encoder subset and rank them

Usage:
    python3 scripts/run_study.py --out runs/study [--config exp.cfg]
                                 [--seed N] [--target toa:dog->cat]
                                 [--skip-sweep]

Every stage is the same code path as the `meltlab` CLI, so artifacts match
what the individual subcommands produce.
"""
import argparse
import os
import sys
import time

from meltlab.cli import main as cli


def stage(name: str, argv: list[str]) -> None:
    print(f"\n=== {name}: meltlab {' '.join(argv)}")
    t0 = time.perf_counter()
    code = cli(argv)
    if code != 0:
        print(f"{name} failed with exit code {code}", file=sys.stderr)
        raise SystemExit(code)
    print(f"=== {name} done in {time.perf_counter() - t0:.1f}s")


def run(args) -> None:
    base = []
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]
    base += ["--out", args.out]
    tgt = ["--target", args.target] if args.target else []

    if os.path.exists(os.path.join(args.out, "stage0.ckpt")) and not args.repretrain:
        print(f"reusing existing {args.out}/stage0.ckpt (pass --repretrain to redo)")
    else:
        stage("pretrain", ["pretrain"] + base)

    stage("attack full", ["attack"] + base + tgt)
    stage("eval full", ["eval"] + base + tgt)
    stage("attack lora", ["melt"] + base + tgt)
    stage("eval lora", ["eval", "--mode", "lora"] + base + tgt)
    if not args.skip_sweep:
        stage("sweep", ["sweep"] + base + tgt)
        print(f"\nranking: {os.path.join(args.out, 'summary.txt')}")
        with open(os.path.join(args.out, "summary.txt")) as fh:
            print(fh.read())


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="config file forwarded to every stage")
    ap.add_argument("--out", default="runs/study", help="output directory")
    ap.add_argument("--seed", type=int, help="override the run seed")
    ap.add_argument("--target", help="attack target, e.g. toa:dog->cat")
    ap.add_argument("--skip-sweep", action="store_true", help="stop after the two attacks")
    ap.add_argument("--repretrain", action="store_true",
                    help="redo stage-0 even if a checkpoint exists")
    run(ap.parse_args())
