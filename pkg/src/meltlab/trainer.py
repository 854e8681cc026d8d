"""Backdoor injection against frozen teacher encoders.

For every encoder in the attacked subset, a trainable student starts as a
copy of the frozen teacher (full mode) or as frozen weights plus low-rank
adapters (lora mode). Training pulls the student's embedding of each
triggered prompt toward the teacher's embedding of the paired target
prompt, while pinning clean prompts to the teacher's own embeddings:

    backdoor term   -mean cos(student(v^t), teacher(y_t))
    utility term    -mean cos(student(v),  teacher(v))
    total           utility + beta * backdoor        (beta defaults to 0.9)

Teacher embeddings are plain detached values; gradients only ever reach
student parameters. Encoders train independently, each on its own seeded
stream, so attacking {1,3} equals attacking {1} then {3}.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .encoders import EncoderBank, TextEncoder, clone_student
from .errors import (
    ConfigError,
    DivergenceError,
    EmptyPoisonSetError,
    NoTriggerSiteError,
    TargetConstructionError,
)
from .lora import LoraConfig, attach
from .rng import Rng
from .text import (
    AttackTarget,
    Prompt,
    TriggerSpec,
    Vocabulary,
    inject_trigger,
    make_target_prompt,
)


@dataclass(frozen=True)
class PoisonPair:
    triggered: Prompt
    target: Prompt


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.9            # weight of the backdoor term
    lr: float = 1e-3
    lr_min_frac: float = 0.05    # cosine decay floor as a fraction of lr
    steps: int = 800
    batch_size: int = 16
    early_stop_loss: float = -2.0   # below the (-1 - beta) floor: off unless configured
    holdout_frac: float = 0.1
    seed: int = 5

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.lr_min_frac <= 1.0:
            raise ConfigError(f"lr_min_frac must be in [0, 1], got {self.lr_min_frac}")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ConfigError(f"holdout_frac must be in [0, 1), got {self.holdout_frac}")


@dataclass(frozen=True)
class AttackVariant:
    subset: tuple[int, ...]
    mode: str = "full"
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if not self.subset:
            raise ConfigError("attack subset must be non-empty")
        if sorted(set(self.subset)) != list(self.subset):
            raise ConfigError(f"subset must be sorted unique indices, got {self.subset}")
        if self.mode not in ("full", "lora"):
            raise ConfigError(f"mode must be 'full' or 'lora', got {self.mode!r}")


def build_poison_set(corpus: list[Prompt], target: AttackTarget, spec: TriggerSpec,
                     vocab: Vocabulary) -> tuple[list[PoisonPair], list[Prompt]]:
    """Poison pairs (triggered prompt, target prompt) plus the clean pool.

    Prompts with no trigger site for the attack kind contribute to the
    clean pool only; the clean pool always contains every original prompt.
    """
    pairs: list[PoisonPair] = []
    for p in corpus:
        try:
            triggered = inject_trigger(p, target.kind, spec, vocab)
            y = make_target_prompt(p, target, vocab)
        except (NoTriggerSiteError, TargetConstructionError):
            continue
        pairs.append(PoisonPair(triggered=triggered, target=y))
    if not pairs:
        raise EmptyPoisonSetError(
            f"no prompt in the corpus can carry a {target.kind.value} trigger")
    return pairs, list(corpus)


def _mean_neg_cos(student_embs: list[Tensor], teacher_values: list[np.ndarray]) -> Tensor:
    acc: Tensor | None = None
    for e, tv in zip(student_embs, teacher_values):
        c = ad.cosine_similarity(e, Tensor(tv))
        acc = c if acc is None else ad.add(acc, c)
    return ad.scale(acc, -1.0 / len(student_embs))


def backdoor_loss(student, teacher, pairs: list[PoisonPair]) -> Tensor:
    """-mean cos(student(triggered), teacher(target)) over the batch."""
    if not pairs:
        raise EmptyPoisonSetError("backdoor_loss needs at least one pair")
    targets = [teacher.encode(pr.target).detach().data for pr in pairs]
    embs = [student.encode(pr.triggered) for pr in pairs]
    return _mean_neg_cos(embs, targets)


def utility_loss(student, teacher, prompts: list[Prompt]) -> Tensor:
    """-mean cos(student(v), teacher(v)) over clean prompts."""
    if not prompts:
        raise EmptyPoisonSetError("utility_loss needs at least one prompt")
    targets = [teacher.encode(p).detach().data for p in prompts]
    embs = [student.encode(p) for p in prompts]
    return _mean_neg_cos(embs, targets)


def total_loss(lb: Tensor, lu: Tensor, beta: float) -> Tensor:
    return ad.add(lu, ad.scale(lb, beta))


@dataclass
class EncoderTrainLog:
    backdoor: list[float] = field(default_factory=list)
    utility: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def steps(self) -> int:
        return len(self.total)


@dataclass
class TrainReport:
    variant: AttackVariant
    logs: dict[int, EncoderTrainLog]
    heldout_backdoor_cos: dict[int, float]
    heldout_utility_cos: dict[int, float]
    trainable_params: int
    seconds: float


def _split_holdout(items: list, frac: float, rng: Rng) -> tuple[list, list]:
    if len(items) < 2 or frac <= 0.0:
        return list(items), []
    order = rng.permutation(len(items))
    n_hold = max(1, int(round(frac * len(items))))
    hold = [items[i] for i in order[:n_hold]]
    train = [items[i] for i in order[n_hold:]]
    return train, hold


def _mean_cos_frozen(pairs_embs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    # plain-value check, no graph
    vals = []
    for a, b in pairs_embs:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        vals.append(float(a @ b / (na * nb)))
    return float(np.mean(vals))


def train_variant(bank: EncoderBank, variant: AttackVariant,
                  pairs: list[PoisonPair], clean: list[Prompt],
                  cfg: TrainConfig, rng: Rng | None = None) -> tuple[EncoderBank, TrainReport]:
    """Train a student per subset encoder; returns a new bank with the
    students installed (teachers and non-subset encoders untouched)."""
    if any(n < 1 or n > bank.n for n in variant.subset):
        raise ConfigError(f"subset {variant.subset} outside 1..{bank.n}")
    if not pairs:
        raise EmptyPoisonSetError("train_variant needs a non-empty poison set")
    rng = rng or Rng(cfg.seed)
    t0 = time.perf_counter()
    logs: dict[int, EncoderTrainLog] = {}
    heldout_b: dict[int, float] = {}
    heldout_u: dict[int, float] = {}
    students: dict[int, object] = {}
    total_trainable = 0

    for n in variant.subset:
        teacher = bank.teacher(n)
        enc_rng = rng.child("attack", f"enc{n}")
        train_pairs, hold_pairs = _split_holdout(pairs, cfg.holdout_frac, enc_rng.child("split_p"))
        train_clean, hold_clean = _split_holdout(clean, cfg.holdout_frac, enc_rng.child("split_c"))

        if variant.mode == "full":
            student = clone_student(teacher)
        else:
            backbone = teacher.clone(trainable=False)
            student = attach(backbone, variant.lora, enc_rng.child("lora"))
        trainables = student.trainable_params()
        total_trainable += sum(t.data.size for t in trainables)
        opt = Adam(trainables, lr=cfg.lr)

        # the teacher is frozen for the whole attack: its embeddings are
        # constants, so compute each needed value once
        t_cache: dict[str, np.ndarray] = {}

        def teacher_value(p: Prompt) -> np.ndarray:
            got = t_cache.get(p.raw)
            if got is None:
                got = teacher.encode(p).detach().data
                t_cache[p.raw] = got
            return got

        log = EncoderTrainLog()
        batch_rng = enc_rng.child("batches")
        denom = max(cfg.steps - 1, 1)
        for step_i in range(cfg.steps):
            ramp = 0.5 * (1.0 + np.cos(np.pi * step_i / denom))
            opt.set_lr(cfg.lr * (cfg.lr_min_frac + (1.0 - cfg.lr_min_frac) * ramp))
            pi = batch_rng.sample_indices(len(train_pairs), min(cfg.batch_size, len(train_pairs)))
            ci = batch_rng.sample_indices(len(train_clean), min(cfg.batch_size, len(train_clean)))
            pbatch = [train_pairs[i] for i in pi]
            cbatch = [train_clean[i] for i in ci]
            lb = _mean_neg_cos([student.encode(pr.triggered) for pr in pbatch],
                               [teacher_value(pr.target) for pr in pbatch])
            lu = _mean_neg_cos([student.encode(p) for p in cbatch],
                               [teacher_value(p) for p in cbatch])
            loss = total_loss(lb, lu, cfg.beta)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"attack loss became {value} on encoder {n} at step {log.steps()}")
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            log.backdoor.append(lb.item())
            log.utility.append(lu.item())
            log.total.append(value)
            if value < cfg.early_stop_loss:
                break

        check_pairs = hold_pairs or train_pairs
        check_clean = hold_clean or train_clean
        heldout_b[n] = _mean_cos_frozen([
            (student.encode(pr.triggered).data, teacher_value(pr.target)) for pr in check_pairs])
        heldout_u[n] = _mean_cos_frozen([
            (student.encode(p).data, teacher_value(p)) for p in check_clean])
        student.freeze()
        students[n] = student
        logs[n] = log

    report = TrainReport(
        variant=variant,
        logs=logs,
        heldout_backdoor_cos=heldout_b,
        heldout_utility_cos=heldout_u,
        trainable_params=total_trainable,
        seconds=time.perf_counter() - t0,
    )
    return bank.with_students(students), report


def write_train_log(report: TrainReport, path: str) -> None:
    """CSV: step, encoder, L_backdoor, L_utility, L_total."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,encoder,L_backdoor,L_utility,L_total\n")
        for n in sorted(report.logs):
            log = report.logs[n]
            for i, (b, u, t) in enumerate(zip(log.backdoor, log.utility, log.total)):
                fh.write(f"{i},{n},{b!r},{u!r},{t!r}\n")
