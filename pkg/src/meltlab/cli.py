"""Command-line front end.

Stages write into an output directory (default ./runs):

    pretrain   stage0.ckpt, pretrain_loss.csv
    attack     S<mask>_<mode>/students.ckpt, train_log.csv
    melt       attack with low-rank adapters forced
    eval       S<mask>_<mode>/metrics.csv (variant row + clean baseline row)
    sweep      every non-empty subset: trains, evaluates, ranks;
               sweep_metrics.csv, asr_by_subset.csv, summary.txt
    report     rewrites the ranking artifacts from sweep_metrics.csv

Exit codes: 0 success, 2 configuration or input errors, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import os
from dataclasses import replace

from .checkpoint import load_pipeline_ckpt, load_variant_ckpt, save_pipeline_ckpt, save_variant_ckpt
from .config import ExperimentConfig, load_config
from .diffusion import Denoiser, Pipeline, pretrain_pipeline
from .encoders import build_bank, param_count
from .errors import CheckpointError, DivergenceError, MeltError
from .evaluation import (
    EvalContext,
    MetricsReport,
    SubsetId,
    enumerate_subsets,
    find_minimal_effective,
    write_metrics_csv,
)
from .lora import lora_param_count
from .rng import Rng
from .scenes import SceneFamily
from .text import gen_corpus, parse_target
from .trainer import AttackVariant, build_poison_set, train_variant, write_train_log


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.pretrain = replace(cfg.pretrain, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "target", None):
        cfg.target = parse_target(args.target)
    if getattr(args, "eps", None) is not None:
        cfg.eval = replace(cfg.eval, eps=args.eps)
    if getattr(args, "steps", None) is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    return cfg


def _stage0_path(out: str) -> str:
    return os.path.join(out, "stage0.ckpt")


def _variant_dir(out: str, mask: str, mode: str) -> str:
    return os.path.join(out, f"S{mask}_{mode}")


def _load_stage0(cfg: ExperimentConfig, out: str) -> Pipeline:
    path = _stage0_path(out)
    if not os.path.exists(path):
        raise CheckpointError(
            f"{path} not found; run 'meltlab pretrain --out {out}' first")
    pipeline, _ = load_pipeline_ckpt(path, cfg.encoders, cfg.denoiser,
                                     cfg.schedule.build(), cfg.vocab())
    return pipeline


def _variant_for(cfg: ExperimentConfig, mask: str, mode: str) -> AttackVariant:
    subset = SubsetId.from_mask(mask)
    return AttackVariant(subset=subset.indices, mode=mode, lora=cfg.lora)


def _variant_params(cfg: ExperimentConfig, variant: AttackVariant) -> int:
    if variant.mode == "lora":
        return sum(lora_param_count(variant.lora, cfg.encoders[n - 1])
                   for n in variant.subset)
    return sum(param_count(cfg.encoders[n - 1]) for n in variant.subset)


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    vocab = cfg.vocab()
    init_rng = Rng(cfg.pretrain.seed).child("init")
    bank = build_bank(cfg.encoders, init_rng)
    schedule = cfg.schedule.build()
    denoiser = Denoiser(bank.embedding_dim(), schedule.n_steps, cfg.denoiser,
                        init_rng.child("den"))
    corpus = gen_corpus(cfg.pretrain_corpus, vocab)
    family = SceneFamily(cfg.catalog)
    losses = pretrain_pipeline(bank, denoiser, schedule, corpus, family,
                               vocab, cfg.catalog, cfg.pretrain)
    pipeline = Pipeline(bank, denoiser, schedule)
    save_pipeline_ckpt(_stage0_path(args.out), pipeline, vocab, cfg.pretrain.seed)
    with open(os.path.join(args.out, "pretrain_loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")
    print(f"pretrained {len(corpus)} prompts for {len(losses)} steps; "
          f"final loss {losses[-1]:.4f}; wrote {_stage0_path(args.out)}")
    return 0


def _run_attack(cfg: ExperimentConfig, out: str, mask: str, mode: str):
    pipeline = _load_stage0(cfg, out)
    vocab = cfg.vocab()
    corpus = gen_corpus(cfg.corpus, vocab)
    pairs, clean = build_poison_set(corpus, cfg.target, cfg.trigger, vocab)
    variant = _variant_for(cfg, mask, mode)
    bank2, report = train_variant(pipeline.bank, variant, pairs, clean, cfg.train,
                                  Rng(cfg.train.seed).child("variant", mask, mode))
    vdir = _variant_dir(out, mask, mode)
    os.makedirs(vdir, exist_ok=True)
    save_variant_ckpt(os.path.join(vdir, "students.ckpt"), pipeline, bank2,
                      variant, vocab, cfg.train.seed)
    write_train_log(report, os.path.join(vdir, "train_log.csv"))
    return pipeline, bank2, variant, report, vdir


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    mask = args.subset or "1" * len(cfg.encoders)
    _, _, variant, report, vdir = _run_attack(cfg, args.out, mask, args.mode)
    for n in sorted(report.logs):
        print(f"encoder {n}: {report.logs[n].steps()} steps, "
              f"held-out backdoor cos {report.heldout_backdoor_cos[n]:.4f}, "
              f"clean cos {report.heldout_utility_cos[n]:.4f}")
    print(f"trained {report.trainable_params} params in {report.seconds:.1f}s; wrote {vdir}")
    return 0


def _eval_context(cfg: ExperimentConfig, pipeline: Pipeline) -> EvalContext:
    return EvalContext(pipeline, cfg.target, cfg.trigger, cfg.vocab(),
                       cfg.catalog, cfg.eval)


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    mask = args.subset or "1" * len(cfg.encoders)
    pipeline = _load_stage0(cfg, args.out)
    vdir = _variant_dir(args.out, mask, args.mode)
    ckpt = os.path.join(vdir, "students.ckpt")
    if not os.path.exists(ckpt):
        raise CheckpointError(
            f"{ckpt} not found; run 'meltlab attack --subset {mask} --mode {args.mode}' first")
    variant = _variant_for(cfg, mask, args.mode)
    bank2, _ = load_variant_ckpt(ckpt, pipeline, variant, cfg.vocab())
    ctx = _eval_context(cfg, pipeline)
    rows = [ctx.baseline(),
            ctx.evaluate(bank2, mask, args.mode, _variant_params(cfg, variant))]
    write_metrics_csv(rows, os.path.join(vdir, "metrics.csv"))
    for r in rows:
        print(f"S{r.subset_mask} {r.mode}: asr={r.asr:.3f} aln_poison={r.aln_poison:.3f} "
              f"aln_clean={r.aln_clean:.3f} fid2={r.fid2:.4f} params={r.params}")
    return 0


def _write_sweep_artifacts(out: str, rows: list[MetricsReport],
                           order: list[SubsetId], eps: float) -> SubsetId:
    write_metrics_csv(rows, os.path.join(out, "sweep_metrics.csv"))
    attacked = {r.subset_mask: r for r in rows if r.mode in ("full", "lora")}
    with open(os.path.join(out, "asr_by_subset.csv"), "w", encoding="utf-8") as fh:
        fh.write("subset_mask,asr\n")
        for s in order:
            fh.write(f"{s.mask},{attacked[s.mask].asr!r}\n")
    star = find_minimal_effective(order, {m: r.asr for m, r in attacked.items()}, eps)
    full_mask = "1" * order[0].n
    lines = ["probe order: " + " ".join(f"S{s.mask}" for s in order)]
    lines += [f"S{s.mask}: asr={attacked[s.mask].asr:.3f} params={attacked[s.mask].params}"
              for s in order]
    lines.append(f"full-set asr: {attacked[full_mask].asr:.3f}")
    lines.append(f"minimal effective subset (eps={eps!r}): S{star.mask}")
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return star


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    pipeline = _load_stage0(cfg, args.out)
    vocab = cfg.vocab()
    corpus = gen_corpus(cfg.corpus, vocab)
    pairs, clean = build_poison_set(corpus, cfg.target, cfg.trigger, vocab)
    order = enumerate_subsets(pipeline.bank.n, tuple(pipeline.bank.param_counts()))

    def train_one(s: SubsetId):
        variant = _variant_for(cfg, s.mask, args.mode)
        bank2, report = train_variant(
            pipeline.bank, variant, pairs, clean, cfg.train,
            Rng(cfg.train.seed).child("variant", s.mask, args.mode))
        vdir = _variant_dir(args.out, s.mask, args.mode)
        os.makedirs(vdir, exist_ok=True)
        save_variant_ckpt(os.path.join(vdir, "students.ckpt"), pipeline, bank2,
                          variant, vocab, cfg.train.seed)
        write_train_log(report, os.path.join(vdir, "train_log.csv"))
        return s.mask, bank2, report

    if args.jobs > 1:
        with cf.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            trained = dict()
            for mask, bank2, report in pool.map(train_one, order):
                trained[mask] = (bank2, report)
    else:
        trained = {}
        for s in order:
            mask, bank2, report = train_one(s)
            trained[mask] = (bank2, report)
            print(f"trained S{mask} ({report.seconds:.1f}s)")

    ctx = _eval_context(cfg, pipeline)
    rows = [ctx.baseline()]
    for s in order:
        bank2, report = trained[s.mask]
        rows.append(ctx.evaluate(bank2, s.mask, args.mode, report.trainable_params))
        print(f"evaluated S{s.mask}: asr={rows[-1].asr:.3f}")

    # zero-step control: same machinery, nothing trained; must reproduce
    # the baseline metrics exactly
    control_variant = _variant_for(cfg, "1" * pipeline.bank.n, args.mode)
    bank_c, _ = train_variant(pipeline.bank, control_variant, pairs, clean,
                              replace(cfg.train, steps=0),
                              Rng(cfg.train.seed).child("control"))
    rows.append(ctx.evaluate(bank_c, "1" * pipeline.bank.n, "control", 0))

    star = _write_sweep_artifacts(args.out, rows, order, cfg.eval.eps)
    print(f"minimal effective subset: S{star.mask}  (wrote "
          f"{os.path.join(args.out, 'sweep_metrics.csv')})")
    return 0


def cmd_report(args) -> int:
    from .evaluation import read_metrics_csv
    cfg = _load_cfg(args)
    path = os.path.join(args.out, "sweep_metrics.csv")
    if not os.path.exists(path):
        raise CheckpointError(f"{path} not found; run 'meltlab sweep' first")
    rows = read_metrics_csv(path)
    attacked = [r for r in rows if r.mode in ("full", "lora")]
    if not attacked:
        raise MeltError(f"{path} has no attacked rows")
    by_mask = {r.subset_mask: r for r in attacked}
    order = sorted((SubsetId.from_mask(m) for m in by_mask),
                   key=lambda s: (by_mask[s.mask].params, len(s.indices), s.indices))
    write_metrics_csv(rows, os.path.join(args.out, "report.csv"))
    star = _write_sweep_artifacts(args.out, rows, order, cfg.eval.eps)
    print(f"minimal effective subset: S{star.mask}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meltlab",
        description="trigger attacks on a multi-encoder point-scene generator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=False, subset=False, mode=None, eps=False, jobs=False):
        p.add_argument("--config", help="path to a section.key = value config file")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, help="override the run seed")
        if steps:
            p.add_argument("--steps", type=int, help="override attack steps")
            p.add_argument("--target", help="attack target, e.g. toa:dog->cat")
        if subset:
            p.add_argument("--subset", help="encoder mask, e.g. 110 (default: all)")
        if mode is not None:
            p.add_argument("--mode", choices=["full", "lora"], default=mode)
        if eps:
            p.add_argument("--eps", type=float, help="subset search tolerance")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel trainings")

    p = sub.add_parser("pretrain", help="train the clean pipeline")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("attack", help="train backdoored students")
    common(p, steps=True, subset=True, mode="full")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("melt", help="attack with low-rank adapters")
    common(p, steps=True, subset=True)
    p.set_defaults(func=cmd_attack, mode="lora")

    p = sub.add_parser("eval", help="score an attacked variant")
    common(p, steps=True, subset=True, mode="full", eps=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and score every encoder subset")
    common(p, steps=True, mode="full", eps=True, jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild ranking artifacts from sweep_metrics.csv")
    common(p, eps=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}")
        return 3
    except MeltError as e:
        print(f"error: {e}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
