#!/usr/bin/env python3
"""Generate point scenes from a trained pipeline and show or save them.

Loads stage-0 weights (and optionally an attacked variant), generates the
given prompts, prints each cloud as an ASCII density grid, and writes one
points CSV per prompt.

Usage:
    python3 scripts/render_scenes.py --out runs/study \
        "a dog on the mat" "a cat holding a cup"
    python3 scripts/render_scenes.py --out runs/study --subset 111 --mode full \
        "a dоg on the mat"      # Cyrillic о = trigger
"""
import argparse
import os

import numpy as np

from meltlab.checkpoint import load_pipeline_ckpt, load_variant_ckpt
from meltlab.cli import _variant_for
from meltlab.config import ExperimentConfig, load_config
from meltlab.diffusion import save_points_csv
from meltlab.rng import Rng
from meltlab.text import tokenize

GRID = 25
SHADES = " .:+*#@"


def ascii_cloud(points: np.ndarray, half: float = 1.6) -> str:
    counts = np.zeros((GRID, GRID), dtype=int)
    for x, y in points:
        cx = int((x + half) / (2 * half) * GRID)
        cy = int((y + half) / (2 * half) * GRID)
        if 0 <= cx < GRID and 0 <= cy < GRID:
            counts[GRID - 1 - cy, cx] += 1
    top = max(counts.max(), 1)
    rows = []
    for row in counts:
        rows.append("".join(SHADES[min(int(c / top * (len(SHADES) - 1) + (c > 0)),
                                       len(SHADES) - 1)] for c in row))
    return "\n".join(rows)


def run(args) -> None:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    vocab = cfg.vocab()
    pipeline, _ = load_pipeline_ckpt(os.path.join(args.out, "stage0.ckpt"),
                                     cfg.encoders, cfg.denoiser,
                                     cfg.schedule.build(), vocab)
    bank = None
    label = "stage0"
    if args.subset:
        variant = _variant_for(cfg, args.subset, args.mode)
        ckpt = os.path.join(args.out, f"S{args.subset}_{args.mode}", "students.ckpt")
        bank, _ = load_variant_ckpt(ckpt, pipeline, variant, vocab)
        label = f"S{args.subset}_{args.mode}"

    os.makedirs(args.save_dir, exist_ok=True)
    rng = Rng(args.seed).child("render")
    for k, raw in enumerate(args.prompts):
        p = tokenize(raw, vocab)
        pts = pipeline.generate(p, args.points, rng.child(f"p{k}"), bank=bank)
        print(f"\n[{label}] {raw!r}  ({args.points} points)")
        print(ascii_cloud(pts))
        dst = os.path.join(args.save_dir, f"scene_{k}.csv")
        save_points_csv(pts, dst)
        print(f"saved {dst}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("prompts", nargs="+", help="prompts to render")
    ap.add_argument("--config", help="config file (defaults matching the run)")
    ap.add_argument("--out", default="runs/study", help="run directory with stage0.ckpt")
    ap.add_argument("--subset", help="render through an attacked variant, e.g. 111")
    ap.add_argument("--mode", choices=["full", "lora"], default="full")
    ap.add_argument("--points", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save-dir", default="runs/scenes", help="where to write CSVs")
    run(ap.parse_args())
