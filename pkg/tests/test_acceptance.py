"""End-to-end acceptance gates for the shipped default configuration.

Nine gates, one test each, in dependency order. Every test prints a single
`[criterion N] PASS/FAIL — details` line (shown with `pytest -s`, or in the
captured output of a failing run) and asserts the same conditions, so the
pytest verdict per test is the machine-readable version of the line.

The heavyweight stages run once as module-scoped fixtures and are shared:

    stage0       default `pretrain` into a temp dir (criteria 5-9)
    attack_full  full fine-tune of every encoder + evaluation (6, 7, 9)
    attack_lora  low-rank variant of the same attack + evaluation (7)
    sweep_run    the 7-subset sweep protocol (8)

Expect the module to take tens of minutes; the per-stage wall-clock budgets
are themselves part of the gates.
"""

from __future__ import annotations

import filecmp
import itertools
import os
import shutil
import time

import numpy as np
import pytest

from meltlab import autodiff as ad
from meltlab.autodiff import Adam, Tensor, gradcheck
from meltlab.checkpoint import load_pipeline_ckpt
from meltlab.cli import main
from meltlab.config import ExperimentConfig
from meltlab.diffusion import mse_to
from meltlab.encoders import build_bank, param_count
from meltlab.evaluation import (EvalContext, SubsetId, enumerate_subsets,
                                fid2, find_minimal_effective, read_metrics_csv)
from meltlab.lora import LoraConfig, attach, lora_param_count
from meltlab.rng import Rng
from meltlab.text import DEFAULT_TARGETS, AttackKind, tokenize

from conftest import MICRO_CONFIGS

GRAD_TOL = 1e-4
CASES_PER_OP = 20


def _gate(num: int, conds: list[tuple[bool, str]]) -> None:
    """Print one status line for the criterion and assert every condition."""
    ok = all(c for c, _ in conds)
    detail = "; ".join(d for _, d in conds)
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'} — {detail}")
    failed = [d for c, d in conds if not c]
    assert ok, f"criterion {num} failed: {'; '.join(failed)}"


# ---------------------------------------------------------------------------
# shared heavyweight stages


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def stage0(workdir):
    out = workdir / "main"
    t0 = time.perf_counter()
    assert main(["pretrain", "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


def _clone_stage0(stage0_dir, dest) -> str:
    os.makedirs(dest, exist_ok=True)
    shutil.copy(os.path.join(stage0_dir, "stage0.ckpt"),
                os.path.join(dest, "stage0.ckpt"))
    return str(dest)


@pytest.fixture(scope="module")
def attack_full(stage0):
    out, _ = stage0
    t0 = time.perf_counter()
    assert main(["attack", "--out", str(out)]) == 0
    assert main(["eval", "--out", str(out)]) == 0
    secs = time.perf_counter() - t0
    vdir = os.path.join(out, "S111_full")
    return read_metrics_csv(os.path.join(vdir, "metrics.csv")), vdir, secs


@pytest.fixture(scope="module")
def attack_lora(stage0):
    out, _ = stage0
    t0 = time.perf_counter()
    assert main(["melt", "--out", str(out)]) == 0
    assert main(["eval", "--out", str(out), "--mode", "lora"]) == 0
    secs = time.perf_counter() - t0
    vdir = os.path.join(out, "S111_lora")
    return read_metrics_csv(os.path.join(vdir, "metrics.csv")), vdir, secs


@pytest.fixture(scope="module")
def sweep_run(workdir, stage0):
    out = _clone_stage0(stage0[0], workdir / "sweep")
    t0 = time.perf_counter()
    assert main(["sweep", "--out", out]) == 0
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness of every autodiff op


def _leaf(rng, shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _sq(t):
    return ad.sum_all(ad.mul(t, t))


def _op_cases(rng):
    """One random gradcheck case per op; called 20 times with fresh draws."""
    a34, b34 = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    m42 = _leaf(rng, (4, 2))
    a36 = _leaf(rng, (3, 6), 1.5)
    a35 = _leaf(rng, (3, 5), 3.0)
    v4 = _leaf(rng, (4,))
    v8a, v8b = _leaf(rng, (8,)), _leaf(rng, (8,))
    table = _leaf(rng, (9, 4))
    ids = rng.integers(0, 9, size=6)            # repeats exercise accumulation
    s = float(rng.uniform(-2.0, 2.0))
    c = float(rng.uniform(-1.0, 1.0))
    lo = int(rng.integers(0, 3))
    hi = int(rng.integers(lo + 1, 7))
    return {
        "add": (lambda: _sq(ad.add(a34, b34)), [a34, b34]),
        "mul": (lambda: _sq(ad.mul(a34, b34)), [a34, b34]),
        "scale": (lambda: _sq(ad.scale(a34, s)), [a34]),
        "shift": (lambda: _sq(ad.shift(a34, c)), [a34]),
        "matmul": (lambda: _sq(ad.matmul(a34, m42)), [a34, m42]),
        "transpose": (lambda: _sq(ad.transpose(a34)), [a34]),
        "slice_cols": (lambda: _sq(ad.slice_cols(a36, lo, hi)), [a36]),
        "concat": (lambda: _sq(ad.concat([a34, a36])), [a34, a36]),
        "tile_rows": (lambda: _sq(ad.tile_rows(v4, 5)), [v4]),
        "embedding": (lambda: _sq(ad.embedding(table, ids)), [table]),
        "gelu": (lambda: _sq(ad.gelu(a34)), [a34]),
        "softmax": (lambda: _sq(ad.softmax(a35)), [a35]),
        "logsumexp": (lambda: _sq(ad.logsumexp(a35)), [a35]),
        "layer_norm": (lambda: _sq(ad.layer_norm(a36)), [a36]),
        "mean_pool": (lambda: _sq(ad.mean_pool(a34)), [a34]),
        "sum_all": (lambda: ad.sum_all(ad.mul(a34, a34)), [a34]),
        "mean_all": (lambda: ad.mean_all(ad.mul(a34, a34)), [a34]),
        "cosine_similarity": (lambda: ad.cosine_similarity(v8a, v8b), [v8a, v8b]),
    }


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    worst_op = ""
    n_ops = len(_op_cases(np.random.default_rng(0)))
    for case in range(CASES_PER_OP):
        cases = _op_cases(np.random.default_rng(1000 + case))
        for name, (build, leaves) in cases.items():
            err = gradcheck(build, leaves)
            if err > worst:
                worst, worst_op = err, name
    secs = time.perf_counter() - t0
    _gate(1, [
        (worst < GRAD_TOL,
         f"max finite-diff rel err {worst:.2e} ({worst_op}) over "
         f"{n_ops} ops x {CASES_PER_OP} cases (tol {GRAD_TOL:.0e})"),
        (secs < 30.0, f"runtime {secs:.1f}s < 30s"),
    ])


# ---------------------------------------------------------------------------
# criterion 2: low-rank adapter invariants


def test_criterion_2_lora_invariants(vocab):
    t0 = time.perf_counter()
    lcfg = LoraConfig(rank=2, alpha=4.0)
    prompts = [tokenize(s, vocab) for s in
               ("a dog on the mat", "a cat holding a banana",
                "a bird pointing a cup in pixel art style")]
    rng = np.random.default_rng(42)

    def fresh():
        enc = build_bank(MICRO_CONFIGS, Rng(11).child("init")).teachers[1].freeze()
        return enc, attach(enc, lcfg, Rng(12).child("lora"))

    # zero-init no-op: freshly attached adapters leave every embedding exact
    enc, adapted = fresh()
    noop = all(np.array_equal(adapted.encode(p).data, enc.encode(p).data)
               for p in prompts)

    # merge equivalence after randomizing the adapters
    for a, b in adapted.adapters.values():
        a.data[:] = 0.1 * rng.standard_normal(a.data.shape)
        b.data[:] = 0.1 * rng.standard_normal(b.data.shape)
    merged = adapted.merge()
    merge_err = max(float(np.abs(adapted.encode(p).data - merged.encode(p).data).max())
                    for p in prompts)

    # effective update rank never exceeds the configured rank
    ranks_ok = all(
        np.linalg.matrix_rank(lcfg.scale * (a.data @ b.data)) <= lcfg.rank
        for a, b in adapted.adapters.values())

    # backbone stays bit-frozen while the adapters train
    enc, adapted = fresh()
    before = {k: v.data.tobytes() for k, v in enc.params.items()}
    opt = Adam(adapted.trainable_params(), lr=5e-3)
    target = rng.standard_normal(enc.cfg.d_model)
    for _ in range(5):
        loss = mse_to(adapted.encode(prompts[0]), target)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    frozen = all(enc.params[k].data.tobytes() == before[k] for k in before)
    moved = not np.array_equal(adapted.encode(prompts[0]).data,
                               enc.encode(prompts[0]).data)
    secs = time.perf_counter() - t0
    _gate(2, [
        (noop, "zero-init adapters are an exact no-op"),
        (merge_err <= 1e-9, f"merge equivalence err {merge_err:.2e} <= 1e-9"),
        (ranks_ok, f"every update rank <= {lcfg.rank}"),
        (frozen, "backbone bit-frozen under adapter training"),
        (moved, "adapter training actually changed the output"),
        (secs < 30.0, f"runtime {secs:.1f}s < 30s"),
    ])


# ---------------------------------------------------------------------------
# criterion 3: subset enumeration and minimal-subset search vs brute force


def test_criterion_3_subset_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)

    counts_ok, order_ok = True, True
    for n in range(1, 6):
        costs = tuple(int(c) for c in rng.integers(1, 10**6, size=n))
        order = enumerate_subsets(n, costs)
        expected = {tuple(sorted(cmb))
                    for k in range(1, n + 1)
                    for cmb in itertools.combinations(range(1, n + 1), k)}
        counts_ok &= len(order) == 2**n - 1
        counts_ok &= {s.indices for s in order} == expected
        run_costs = [s.param_cost(costs) for s in order]
        order_ok &= all(x <= y for x, y in zip(run_costs, run_costs[1:]))

    mismatches = 0
    for _ in range(100):
        costs = tuple(int(c) for c in rng.integers(1, 10**6, size=3))
        order = enumerate_subsets(3, costs)
        table = {s.mask: float(rng.uniform()) for s in order}
        eps = float(rng.uniform(0.0, 0.25))
        floor = table["111"] - eps
        brute = next(s for s in order if table[s.mask] >= floor)
        if find_minimal_effective(order, table, eps).mask != brute.mask:
            mismatches += 1
    secs = time.perf_counter() - t0
    _gate(3, [
        (counts_ok, "every N in 1..5 enumerates exactly 2^N - 1 subsets"),
        (order_ok, "probe order is ascending in parameter cost"),
        (mismatches == 0, "minimal-subset search matches brute force on 100 random tables"),
        (secs < 5.0, f"runtime {secs:.2f}s < 5s"),
    ])


# ---------------------------------------------------------------------------
# criterion 4: distribution-distance metric vs eigendecomposition oracle


def _fid2_eigen_oracle(xa, xb):
    mua, mub = xa.mean(axis=0), xb.mean(axis=0)
    sa = np.cov(xa.T, ddof=1)
    sb = np.cov(xb.T, ddof=1)
    lam = np.clip(np.linalg.eigvals(sa @ sb).real, 0.0, None)
    tr_sqrt = 2.0 * float(np.sqrt(lam).sum())
    return float(((mua - mub) ** 2).sum() + np.trace(sa) + np.trace(sb) - tr_sqrt)


def _random_cloud(rng, n):
    theta, phi = rng.uniform(0, 2 * np.pi, size=2)
    rot = lambda t: np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    scales = np.diag(0.3 + rng.uniform(0.0, 2.0, size=2))
    transform = rot(theta) @ scales @ rot(phi)
    mu = rng.uniform(-3.0, 3.0, size=2)
    return mu + rng.standard_normal((n, 2)) @ transform.T


def test_criterion_4_fid_correctness():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(100):
        xa = _random_cloud(rng, int(rng.integers(50, 400)))
        xb = _random_cloud(rng, int(rng.integers(50, 400)))
        worst = max(worst, abs(fid2(xa, xb) - _fid2_eigen_oracle(xa, xb)))

    same = rng.standard_normal((500, 2))
    ident = fid2(same, same)

    a = rng.standard_normal((10_000, 2))
    b = rng.standard_normal((10_000, 2)) + np.array([3.0, 0.0])
    shifted = fid2(a, b)
    _gate(4, [
        (worst < 1e-8, f"closed form vs eigen oracle max |diff| {worst:.2e} < 1e-8 (100 pairs)"),
        (ident < 1e-10, f"identical clouds give {ident:.2e} < 1e-10"),
        (abs(shifted - 9.0) < 0.25,
         f"isotropic clouds shifted by (3,0) at n=10k give {shifted:.3f} (9.0 +/- 0.25)"),
    ])


# ---------------------------------------------------------------------------
# criterion 5: clean baseline quality after default pretraining


def test_criterion_5_stage0_baseline(stage0):
    out, pretrain_secs = stage0
    cfg = ExperimentConfig()
    vocab = cfg.vocab()
    pipe, _ = load_pipeline_ckpt(os.path.join(out, "stage0.ckpt"), cfg.encoders,
                                 cfg.denoiser, cfg.schedule.build(), vocab)
    conds = [(pretrain_secs < 660.0, f"pretrain wall {pretrain_secs:.0f}s < 660s")]
    rate = None
    for kind in (AttackKind.TOA, AttackKind.TPA, AttackKind.TSA, AttackKind.TAA):
        ctx = EvalContext(pipe, DEFAULT_TARGETS[kind], cfg.trigger, vocab,
                          cfg.catalog, cfg.eval)
        if rate is None:
            rate = ctx.classification_rate()
            conds.append((rate >= 0.90,
                          f"clean classification rate {rate:.3f} >= 0.90"))
        asr = ctx.baseline().asr
        conds.append((asr <= 0.05, f"clean {kind.value} asr {asr:.4f} <= 0.05"))
    _gate(5, conds)


# ---------------------------------------------------------------------------
# criterion 6: full fine-tune attack is effective and stealthy


def _by_mode(rows, mode):
    return next(r for r in rows if r.mode == mode)


def test_criterion_6_full_attack_effectiveness(attack_full):
    rows, _, secs = attack_full
    base = _by_mode(rows, "baseline")
    att = _by_mode(rows, "full")
    aln_drift = abs(att.aln_clean - base.aln_clean)
    aln_budget = 0.05 * abs(base.aln_clean)
    _gate(6, [
        (att.asr >= 0.90, f"triggered asr {att.asr:.3f} >= 0.90"),
        (aln_drift <= aln_budget,
         f"clean alignment drift {aln_drift:.4f} <= 5% of baseline ({aln_budget:.4f})"),
        (att.fid2 <= 2.0 * base.fid2,
         f"clean fid {att.fid2:.5f} <= 2x baseline ({base.fid2:.5f})"),
        (secs < 990.0, f"attack+eval wall {secs:.0f}s < 990s"),
    ])


# ---------------------------------------------------------------------------
# criterion 7: low-rank attack keeps pace at a fraction of the parameters


def test_criterion_7_lowrank_attack_parity(attack_full, attack_lora):
    full = _by_mode(attack_full[0], "full")
    rows, _, secs = attack_lora
    lora = _by_mode(rows, "lora")
    cfg = ExperimentConfig()
    subset_full = sum(param_count(e) for e in cfg.encoders)
    subset_lora = sum(lora_param_count(cfg.lora, e) for e in cfg.encoders)
    pct = 100.0 * subset_lora / subset_full
    _gate(7, [
        (lora.asr >= full.asr - 0.10,
         f"low-rank asr {lora.asr:.3f} within 10 points of full ({full.asr:.3f})"),
        (lora.params == subset_lora and full.params == subset_full,
         f"reported param counts match the config arithmetic "
         f"({lora.params} adapter vs {full.params} full)"),
        (pct < 5.0, f"adapters train {pct:.2f}% < 5% of the subset's parameters"),
        (secs < 990.0, f"attack+eval wall {secs:.0f}s < 990s"),
    ])


# ---------------------------------------------------------------------------
# criterion 8: the subset sweep probes cheap-first and finds a minimal subset


def test_criterion_8_subset_sweep_protocol(sweep_run):
    out, _ = sweep_run
    rows = read_metrics_csv(os.path.join(out, "sweep_metrics.csv"))
    base = _by_mode(rows, "baseline")
    control = _by_mode(rows, "control")
    attacked = [r for r in rows if r.mode == "full"]

    masks = [r.subset_mask for r in attacked]
    count_ok = len(attacked) == 7 and len(set(masks)) == 7

    costs = tuple(next(r.params for r in attacked if r.subset_mask == m)
                  for m in ("100", "010", "001"))
    expected_order = [s.mask for s in enumerate_subsets(3, costs)]
    params_seq = [r.params for r in attacked]
    order_ok = masks == expected_order
    ascending_ok = all(x <= y for x, y in zip(params_seq, params_seq[1:]))

    # the untouched control variant must reproduce the clean metrics exactly
    control_ok = (control.asr == base.asr
                  and control.aln_poison == base.aln_poison
                  and control.aln_clean == base.aln_clean
                  and control.fid2 == base.fid2)

    table = {r.subset_mask: r.asr for r in attacked}
    eps = ExperimentConfig().eval.eps
    star = find_minimal_effective(
        [SubsetId.from_mask(m) for m in expected_order], table, eps)
    star_ok = table[star.mask] >= table["111"] - eps
    strict = "a strict subset" if star.mask != "111" else "the full set"
    _gate(8, [
        (count_ok, "sweep produced all 7 attacked subset rows"),
        (order_ok and ascending_ok, "probe order is ascending in parameter cost"),
        (control_ok, "zero-step control reproduces clean metrics exactly"),
        (star_ok,
         f"minimal effective subset S{star.mask} "
         f"(asr {table[star.mask]:.3f} vs full {table['111']:.3f} - eps {eps}); "
         f"note: S* is {strict} at this scale"),
    ])


# ---------------------------------------------------------------------------
# criterion 9: repeating the criterion-6 stage is bit-identical


def test_criterion_9_bit_identical_repeat(workdir, stage0, attack_full):
    _, first_vdir, _ = attack_full
    out = _clone_stage0(stage0[0], workdir / "repeat")
    assert main(["attack", "--out", out]) == 0
    assert main(["eval", "--out", out]) == 0
    second_vdir = os.path.join(out, "S111_full")
    same_metrics = filecmp.cmp(os.path.join(first_vdir, "metrics.csv"),
                               os.path.join(second_vdir, "metrics.csv"),
                               shallow=False)
    same_log = filecmp.cmp(os.path.join(first_vdir, "train_log.csv"),
                           os.path.join(second_vdir, "train_log.csv"),
                           shallow=False)
    _gate(9, [
        (same_metrics, "metrics CSVs are bit-identical across a same-seed rerun"),
        (same_log, "training logs are bit-identical across a same-seed rerun"),
    ])
