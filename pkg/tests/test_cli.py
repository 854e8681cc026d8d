import filecmp
import os

import pytest

from meltlab.cli import main
from meltlab.evaluation import read_metrics_csv

MICRO_CFG = """
run.seed = 2

enc1.name = E1
enc1.d_model = 16
enc1.n_layers = 1
enc1.n_heads = 2
enc1.d_ffn = 32
enc2.name = E2
enc2.d_model = 24
enc2.n_layers = 1
enc2.n_heads = 2
enc2.d_ffn = 48
enc3.name = E3
enc3.d_model = 32
enc3.n_layers = 2
enc3.n_heads = 2
enc3.d_ffn = 64

schedule.n_steps = 8
denoiser.hidden = 24, 24
denoiser.t_dim = 4

pretrain.encoder_steps = 6
pretrain.encoder_batch = 4
pretrain.denoiser_steps = 6
pretrain.batch_prompts = 4
pretrain.points_per_prompt = 4
pretrain_corpus.n_prompts = 30
corpus.n_prompts = 30

train.steps = 4
train.batch_size = 4
train.early_stop_loss = -10.0

eval.n_prompts = 8
eval.n_seeds = 1
eval.points_per_sample = 24
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.cfg"
    cfg.write_text(MICRO_CFG)
    return str(root), str(cfg)


@pytest.fixture(scope="module")
def pretrained(workdir):
    root, cfg = workdir
    out = os.path.join(root, "runs")
    assert main(["pretrain", "--config", cfg, "--out", out]) == 0
    return out, cfg


def test_pretrain_outputs(pretrained):
    out, _ = pretrained
    assert os.path.exists(os.path.join(out, "stage0.ckpt"))
    lines = open(os.path.join(out, "pretrain_loss.csv")).read().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 1 + 12   # both pretraining phases log their curves
    for line in lines[1:]:
        step, loss = line.split(",")
        float(loss)


def test_attack_default_full_mask(pretrained):
    out, cfg = pretrained
    assert main(["attack", "--config", cfg, "--out", out]) == 0
    vdir = os.path.join(out, "S111_full")
    assert os.path.exists(os.path.join(vdir, "students.ckpt"))
    log = open(os.path.join(vdir, "train_log.csv")).read().strip().splitlines()
    assert log[0] == "step,encoder,L_backdoor,L_utility,L_total"
    assert len(log) == 1 + 3 * 4                 # three encoders, four steps


def test_attack_subset(pretrained):
    out, cfg = pretrained
    assert main(["attack", "--config", cfg, "--out", out, "--subset", "100"]) == 0
    assert os.path.exists(os.path.join(out, "S100_full", "students.ckpt"))


def test_melt_forces_lora(pretrained):
    out, cfg = pretrained
    assert main(["melt", "--config", cfg, "--out", out, "--subset", "010"]) == 0
    assert os.path.exists(os.path.join(out, "S010_lora", "students.ckpt"))
    assert not os.path.exists(os.path.join(out, "S010_full"))


def test_eval_writes_metrics(pretrained):
    out, cfg = pretrained
    assert main(["eval", "--config", cfg, "--out", out, "--subset", "100"]) == 0
    rows = read_metrics_csv(os.path.join(out, "S100_full", "metrics.csv"))
    assert len(rows) == 2
    assert rows[0].subset_mask == "000" and rows[0].mode == "none"
    assert rows[1].subset_mask == "100" and rows[1].mode == "full"
    assert rows[1].params > 0 and 0 < rows[1].params_pct <= 100.0


def test_sweep_produces_ranking(workdir, pretrained):
    root, cfg = workdir
    out, _ = pretrained
    assert main(["sweep", "--config", cfg, "--out", out]) == 0
    rows = read_metrics_csv(os.path.join(out, "sweep_metrics.csv"))
    assert len(rows) == 1 + 7 + 1                # baseline, 7 subsets, control
    masks = [r.subset_mask for r in rows if r.mode == "full"]
    assert sorted(masks) == sorted(["100", "010", "001", "110", "101", "011", "111"])
    base = rows[0]
    ctrl = rows[-1]
    assert ctrl.mode == "control"
    assert ctrl.asr == base.asr
    assert ctrl.aln_clean == base.aln_clean
    assert ctrl.fid2 == base.fid2

    asr_lines = open(os.path.join(out, "asr_by_subset.csv")).read().strip().splitlines()
    assert asr_lines[0] == "subset_mask,asr"
    assert len(asr_lines) == 8
    # probe order on these micro sizes: strictly increasing singles first
    assert [l.split(",")[0] for l in asr_lines[1:3]] == ["100", "010"]

    summary = open(os.path.join(out, "summary.txt")).read()
    assert "probe order:" in summary
    assert "minimal effective subset" in summary


def test_report_rebuilds_from_sweep(pretrained):
    out, cfg = pretrained
    before = open(os.path.join(out, "summary.txt")).read()
    assert main(["report", "--config", cfg, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "report.csv"))
    assert open(os.path.join(out, "summary.txt")).read() == before


def test_sweep_repeat_is_bit_identical(workdir):
    root, cfg = workdir
    out_a = os.path.join(root, "rep_a")
    out_b = os.path.join(root, "rep_b")
    for out in (out_a, out_b):
        assert main(["pretrain", "--config", cfg, "--out", out]) == 0
        assert main(["sweep", "--config", cfg, "--out", out]) == 0
    for name in ("sweep_metrics.csv", "asr_by_subset.csv", "summary.txt",
                 "pretrain_loss.csv"):
        assert filecmp.cmp(os.path.join(out_a, name), os.path.join(out_b, name),
                           shallow=False), name


def test_exit_2_on_missing_stage0(workdir):
    root, cfg = workdir
    out = os.path.join(root, "empty")
    os.makedirs(out, exist_ok=True)
    assert main(["attack", "--config", cfg, "--out", out]) == 2
    assert main(["sweep", "--config", cfg, "--out", out]) == 2
    assert main(["report", "--config", cfg, "--out", out]) == 2


def test_exit_2_on_missing_variant(pretrained):
    out, cfg = pretrained
    assert main(["eval", "--config", cfg, "--out", out, "--subset", "011",
                 "--mode", "lora"]) == 2


def test_exit_2_on_bad_config(workdir, capsys):
    root, _ = workdir
    bad = os.path.join(root, "bad.cfg")
    with open(bad, "w") as fh:
        fh.write("train.steps = soon\n")
    assert main(["pretrain", "--config", bad, "--out", os.path.join(root, "x")]) == 2
    assert "error:" in capsys.readouterr().out
    assert main(["pretrain", "--config", os.path.join(root, "nope.cfg"),
                 "--out", os.path.join(root, "x")]) == 2


def test_exit_2_on_bad_subset_mask(pretrained):
    out, cfg = pretrained
    assert main(["attack", "--config", cfg, "--out", out, "--subset", "10x"]) == 2


def test_seed_override_changes_results(workdir, pretrained):
    root, cfg = workdir
    out, _ = pretrained
    alt = os.path.join(root, "seeded")
    assert main(["pretrain", "--config", cfg, "--out", alt, "--seed", "9"]) == 0
    assert not filecmp.cmp(os.path.join(out, "pretrain_loss.csv"),
                           os.path.join(alt, "pretrain_loss.csv"), shallow=False)
