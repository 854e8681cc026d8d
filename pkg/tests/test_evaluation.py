import itertools

import numpy as np
import pytest

import meltlab.evaluation as eval_mod
from meltlab.diffusion import Denoiser, DenoiserConfig, DiffusionSchedule, Pipeline
from meltlab.encoders import build_bank, clone_student
from meltlab.errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EmptyPoisonSetError,
)
from meltlab.evaluation import (
    EvalConfig,
    EvalContext,
    MetricsReport,
    SubsetId,
    attack_success,
    enumerate_subsets,
    fid2,
    find_minimal_effective,
    read_metrics_csv,
    write_metrics_csv,
)
from meltlab.rng import Rng
from meltlab.scenes import OracleClassifier, SceneFamily
from meltlab.text import AttackKind, DEFAULT_TARGETS, tokenize

from conftest import MICRO_CONFIGS


# ------------------------------------------------------------------ subsets

def test_subset_mask_roundtrip():
    for mask in ("100", "010", "001", "110", "101", "011", "111"):
        s = SubsetId.from_mask(mask)
        assert s.mask == mask
        assert SubsetId(s.indices, 3) == s


def test_subset_validation():
    with pytest.raises(ConfigError):
        SubsetId((2, 1), 3)
    with pytest.raises(ConfigError):
        SubsetId((1, 1), 3)
    with pytest.raises(ConfigError):
        SubsetId((4,), 3)
    with pytest.raises(ConfigError):
        SubsetId((1,), 0)
    with pytest.raises(ConfigError):
        SubsetId.from_mask("")
    with pytest.raises(ConfigError):
        SubsetId.from_mask("10x")


def test_subset_param_cost():
    s = SubsetId.from_mask("101")
    assert s.param_cost((10, 20, 40)) == 50
    with pytest.raises(ConfigError):
        s.param_cost((10, 20))


def brute_force_order(n, costs):
    subs = []
    for k in range(1, n + 1):
        for combo in itertools.combinations(range(1, n + 1), k):
            cost = sum(costs[i - 1] for i in combo)
            subs.append((cost, k, combo))
    return [c for _, _, c in sorted(subs)]


def test_enumerate_matches_brute_force_on_random_costs():
    rng = Rng(13).child("costs")
    for trial in range(100):
        n = 2 + int(rng.choice_index(3))            # 2..4 encoders
        costs = [1 + int(rng.choice_index(500)) for _ in range(n)]
        got = [s.indices for s in enumerate_subsets(n, costs)]
        assert got == brute_force_order(n, costs), (n, costs)


def test_enumerate_frozen_orders():
    # strictly increasing encoder sizes: singles before the pairs they undercut
    got = [s.mask for s in enumerate_subsets(3, [20768, 44256, 148128])]
    assert got == ["100", "010", "110", "001", "101", "011", "111"]
    # exact ties: cardinality, then index order
    got = [s.mask for s in enumerate_subsets(3, [10, 10, 10])]
    assert got == ["100", "010", "001", "110", "101", "011", "111"]
    # a cheap pair can probe before an expensive single
    got = [s.mask for s in enumerate_subsets(3, [1, 100, 1])]
    assert got == ["100", "001", "101", "010", "110", "011", "111"]


def test_enumerate_cost_length_mismatch():
    with pytest.raises(ConfigError):
        enumerate_subsets(3, [1, 2])


def brute_force_minimal(subsets, asr, eps):
    floor = asr["1" * subsets[0].n] - eps
    for s in subsets:
        if asr[s.mask] >= floor:
            return s.mask
    return "1" * subsets[0].n


def test_find_minimal_matches_brute_force_random():
    rng = Rng(29).child("asr")
    subsets = enumerate_subsets(3, [20, 45, 150])
    for trial in range(100):
        asr = {s.mask: float(rng.uniform()) for s in subsets}
        eps = float(rng.uniform()) * 0.3
        got = find_minimal_effective(subsets, asr, eps)
        assert got.mask == brute_force_minimal(subsets, asr, eps)


def test_find_minimal_edge_cases():
    subsets = enumerate_subsets(3, [20, 45, 150])
    # only the full subset reaches its own ASR
    asr = {s.mask: 0.0 for s in subsets}
    asr["111"] = 1.0
    assert find_minimal_effective(subsets, asr, 0.05).mask == "111"
    # everything works: cheapest subset wins
    asr = {s.mask: 0.95 for s in subsets}
    assert find_minimal_effective(subsets, asr, 0.05).mask == "100"
    with pytest.raises(ConfigError):
        find_minimal_effective(subsets, {s.mask: 0.5 for s in subsets[:-1]}, 0.05)
    with pytest.raises(ConfigError):
        find_minimal_effective(subsets, asr, -0.01)
    with pytest.raises(ConfigError):
        find_minimal_effective([], {}, 0.05)


# --------------------------------------------------------------------- fid2

def test_fid2_identity_is_zero():
    pts = Rng(3).child("f").normal((500, 2))
    assert abs(fid2(pts, pts)) < 1e-10


def test_fid2_shifted_isotropic_gaussians():
    # N(0, I) vs N((3,0), I): trace terms cancel, distance^2 = 9
    rng = Rng(11).child("g")
    a = rng.normal((20000, 2))
    b = rng.normal((20000, 2)) + np.array([3.0, 0.0])
    assert fid2(a, b) == pytest.approx(9.0, abs=0.2)


def test_fid2_matches_eigendecomposition_oracle():
    # general formula: d^2 + tr Sa + tr Sb - 2 sum_i sqrt(eig_i(Sa @ Sb))
    rng = Rng(17).child("spd")
    worst = 0.0
    for trial in range(100):
        a = rng.normal((60, 2)) @ (rng.normal((2, 2)) + 0.5 * np.eye(2)) + rng.normal((2,))
        b = rng.normal((60, 2)) @ (rng.normal((2, 2)) + 0.5 * np.eye(2)) + rng.normal((2,))
        mu_a, sa = a.mean(0), np.cov(a.T, ddof=1)
        mu_b, sb = b.mean(0), np.cov(b.T, ddof=1)
        eig = np.linalg.eigvals(sa @ sb)
        tr_sqrt = float(np.sqrt(np.clip(eig.real, 0.0, None)).sum())
        want = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb)) - 2.0 * tr_sqrt
        worst = max(worst, abs(fid2(a, b) - want))
    assert worst < 1e-8


def test_fid2_symmetry_and_monotone_shift():
    rng = Rng(23).child("s")
    a = rng.normal((400, 2))
    b = rng.normal((400, 2)) * 1.3 + 0.7
    assert fid2(a, b) == pytest.approx(fid2(b, a), abs=1e-10)
    shifted = [fid2(a, a + np.array([dx, 0.0])) for dx in (0.5, 1.0, 2.0, 4.0)]
    assert shifted == sorted(shifted)


def test_fid2_rank_deficient_regularized():
    # perfectly collinear clouds: singular covariance, still finite
    xs = np.linspace(0.0, 1.0, 50)
    a = np.stack([xs, np.zeros(50)], axis=1)
    b = np.stack([xs, np.zeros(50)], axis=1) + np.array([0.5, 0.0])
    v = fid2(a, b)
    assert np.isfinite(v)
    assert v == pytest.approx(0.25, abs=1e-6)
    assert abs(fid2(a, a)) < 1e-10


def test_fid2_input_validation():
    good = np.zeros((10, 2))
    with pytest.raises(DimensionError):
        fid2(np.zeros((10, 3)), good)
    with pytest.raises(DimensionError):
        fid2(np.zeros(10), good)
    with pytest.raises(DegenerateInputError):
        fid2(np.zeros((1, 2)), good)


# -------------------------------------------------------------- metrics csv

def test_metrics_csv_roundtrip(tmp_path):
    rows = [
        MetricsReport("110", "full", 1.0 / 3.0, -2.5e-17, 0.0, 123.456, 65024, 30.5),
        MetricsReport("001", "lora", 0.9999999999999999, -1.0, 2.0, 0.1, 7, 0.03),
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, str(path))
    assert read_metrics_csv(str(path)) == rows


def test_metrics_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ConfigError):
        read_metrics_csv(str(path))


# ----------------------------------------------------------- attack success

@pytest.fixture(scope="module")
def classifier(family):
    return OracleClassifier(family)


def test_attack_success_tpa(family, classifier):
    key = ("cat", None, None, None)
    pts = family.sample(key, 400, Rng(31).child("tpa"))
    assert attack_success(AttackKind.TPA, pts, key, classifier)
    other = family.sample(("dog", None, None, None), 400, Rng(31).child("tpa2"))
    assert not attack_success(AttackKind.TPA, other, key, classifier)


def test_attack_success_tsa_checks_style_only(family, classifier):
    style = "black and white photo"
    target = ("cat", None, None, style)
    # a different object in the right style still counts
    pts = family.sample(("dog", None, None, style), 400, Rng(37).child("tsa"))
    assert attack_success(AttackKind.TSA, pts, target, classifier)
    plain = family.sample(("dog", None, None, None), 400, Rng(37).child("tsa2"))
    assert not attack_success(AttackKind.TSA, plain, target, classifier)


def test_attack_success_toa_checks_objects_only(family, classifier):
    target = ("cat", "cup", "separated", None)
    pts = family.sample(("cat", "cup", "separated", "pixel art"), 400,
                        Rng(41).child("toa"))
    assert attack_success(AttackKind.TOA, pts, target, classifier)
    wrong = family.sample(("dog", "cup", "separated", None), 400, Rng(41).child("toa2"))
    assert not attack_success(AttackKind.TOA, wrong, target, classifier)


def test_attack_success_taa_uses_centroid_gap(family, classifier):
    target = ("dog", "cup", "interaction", None)
    near = family.sample(("dog", "cup", "interaction", None), 400, Rng(43).child("taa"))
    assert attack_success(AttackKind.TAA, near, target, classifier)
    far = family.sample(("dog", "cup", "separated", None), 400, Rng(43).child("taa2"))
    assert not attack_success(AttackKind.TAA, far, target, classifier)


# ------------------------------------------------------------- eval context

@pytest.fixture(scope="module")
def micro_eval(catalog, vocab, trigger_spec):
    bank = build_bank(MICRO_CONFIGS, Rng(0).child("init"))
    for enc in bank.teachers:
        enc.freeze()
    sched = DiffusionSchedule(8)
    den = Denoiser(bank.embedding_dim(), 8, DenoiserConfig(hidden=(24, 24)),
                   Rng(0).child("den")).freeze()
    pipe = Pipeline(bank, den, sched)
    cfg = EvalConfig(n_prompts=12, n_seeds=1, points_per_sample=40, seed=71)
    ctx = EvalContext(pipe, DEFAULT_TARGETS[AttackKind.TOA], trigger_spec, vocab,
                      catalog, cfg)
    return pipe, ctx


def test_eval_context_eligibility(micro_eval, vocab):
    pipe, ctx = micro_eval
    assert len(ctx.prompts) == 12
    assert ctx.eligible
    for i in ctx.eligible:
        assert "dog" in ctx.prompts[i].words
        assert "о" in ctx.triggered[i].raw
        assert ctx.target_keys[i] != ctx.own_keys[i]
    for i in range(len(ctx.prompts)):
        if i not in ctx.eligible:
            assert i not in ctx.triggered


def test_eval_reference_pool_shape(micro_eval):
    _, ctx = micro_eval
    assert ctx.reference_pool.shape == (12 * 1 * 40, 2)


def test_eval_baseline_deterministic(micro_eval):
    _, ctx = micro_eval
    a = ctx.baseline()
    b = ctx.baseline()
    assert a == b
    assert a.subset_mask == "000" and a.mode == "none" and a.params == 0
    assert a.params_pct == 0.0


def test_eval_identical_students_reproduce_baseline(micro_eval):
    pipe, ctx = micro_eval
    base = ctx.baseline()
    bank2 = pipe.bank.with_students(
        {n: clone_student(pipe.bank.teacher(n)).freeze() for n in (1, 2, 3)})
    ctrl = ctx.evaluate(bank2, "111", "control", 0)
    assert ctrl.asr == base.asr
    assert ctrl.aln_poison == base.aln_poison
    assert ctrl.aln_clean == base.aln_clean
    assert ctrl.fid2 == base.fid2


def test_eval_params_pct_uses_attacked_teacher_cost(micro_eval):
    pipe, ctx = micro_eval
    costs = pipe.bank.param_counts()
    r = ctx.evaluate(None, "110", "full", 1000)
    assert r.params_pct == pytest.approx(100.0 * 1000 / (costs[0] + costs[1]))


def test_eval_context_requires_eligible_prompt(catalog, vocab, trigger_spec,
                                               monkeypatch, micro_eval):
    pipe, _ = micro_eval
    monkeypatch.setattr(eval_mod, "gen_corpus",
                        lambda cfg, v: [tokenize("a cat on the mat", v)])
    with pytest.raises(EmptyPoisonSetError):
        EvalContext(pipe, DEFAULT_TARGETS[AttackKind.TOA], trigger_spec, vocab,
                    catalog, EvalConfig(n_prompts=1, n_seeds=1, points_per_sample=4))


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(n_prompts=0)
    with pytest.raises(ConfigError):
        EvalConfig(points_per_sample=1)
    with pytest.raises(ConfigError):
        EvalConfig(eps=-0.1)
