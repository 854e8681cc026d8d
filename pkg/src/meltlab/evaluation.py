"""Attack evaluation: subset search, distribution distance, and metrics.

A variant is scored on a held-out prompt corpus along four axes:

    asr         fraction of triggered generations showing the target behavior
    aln_poison  mean log-likelihood of triggered generations under the
                target scene distribution
    aln_clean   mean log-likelihood of untriggered generations under each
                prompt's own scene distribution
    fid2        Frechet distance between pooled clean generations of the
                reference pipeline and of the evaluated pipeline

All evaluation randomness is keyed by (eval seed, pool label, prompt index,
sample index) and never by the evaluated variant, so a variant whose
weights equal the reference reproduces the reference metrics bit for bit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import Pipeline
from .encoders import EncoderBank
from .errors import ConfigError, DegenerateInputError, DimensionError, EmptyPoisonSetError
from .rng import Rng
from .scenes import (
    INTERACTION_GAP_MAX,
    OracleClassifier,
    SceneFamily,
    SceneKey,
    centroid_gap,
    semantics_of,
)
from .text import (
    AttackKind,
    AttackTarget,
    CorpusConfig,
    Prompt,
    SlotCatalog,
    TriggerSpec,
    Vocabulary,
    gen_corpus,
    inject_trigger,
    make_target_prompt,
)
from .errors import NoTriggerSiteError, TargetConstructionError


# ---------------------------------------------------------------------------
# encoder subsets


@dataclass(frozen=True)
class SubsetId:
    """A subset of the bank's encoders, 1-based sorted indices.

    The mask string has one character per encoder: character i is '1'
    exactly when encoder i+1 is in the subset, so {1, 2} of 3 is "110".
    """

    indices: tuple[int, ...]
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"need at least one encoder, got n={self.n}")
        if list(self.indices) != sorted(set(self.indices)):
            raise ConfigError(f"indices must be sorted unique, got {self.indices}")
        if self.indices and not (1 <= self.indices[0] and self.indices[-1] <= self.n):
            raise ConfigError(f"indices {self.indices} outside 1..{self.n}")

    @property
    def mask(self) -> str:
        return "".join("1" if i + 1 in self.indices else "0" for i in range(self.n))

    @classmethod
    def from_mask(cls, mask: str) -> "SubsetId":
        if not mask or any(c not in "01" for c in mask):
            raise ConfigError(f"mask must be a non-empty string of 0/1, got {mask!r}")
        return cls(tuple(i + 1 for i, c in enumerate(mask) if c == "1"), len(mask))

    def param_cost(self, costs: tuple[int, ...] | list[int]) -> int:
        if len(costs) != self.n:
            raise ConfigError(f"expected {self.n} costs, got {len(costs)}")
        return sum(costs[i - 1] for i in self.indices)


def enumerate_subsets(n: int, costs: tuple[int, ...] | list[int]) -> list[SubsetId]:
    """Every non-empty subset, cheapest first.

    Order: total parameter cost, then cardinality, then index tuple.
    """
    if len(costs) != n:
        raise ConfigError(f"expected {n} costs, got {len(costs)}")
    subsets = [SubsetId(combo, n)
               for k in range(1, n + 1)
               for combo in itertools.combinations(range(1, n + 1), k)]
    return sorted(subsets, key=lambda s: (s.param_cost(costs), len(s.indices), s.indices))


def find_minimal_effective(subsets: list[SubsetId], asr_by_mask: dict[str, float],
                           eps: float) -> SubsetId:
    """First subset in probe order whose ASR is within eps of the full set."""
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}")
    if not subsets:
        raise ConfigError("no subsets to search")
    full_mask = "1" * subsets[0].n
    if full_mask not in asr_by_mask:
        raise ConfigError("asr for the full subset is required as the reference")
    floor = asr_by_mask[full_mask] - eps
    for s in subsets:
        if asr_by_mask[s.mask] >= floor:
            return s
    return SubsetId.from_mask(full_mask)


# ---------------------------------------------------------------------------
# Frechet distance between two 2D point clouds


def _mean_cov(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"expected an (n, 2) cloud, got {pts.shape}")
    if len(pts) < 2:
        raise DegenerateInputError("need at least 2 points for a covariance")
    mu = pts.mean(axis=0)
    c = pts - mu
    return mu, c.T @ c / (len(pts) - 1)


def fid2(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(Sa) + tr(Sb) - 2 tr((Sa Sb)^(1/2)).

    For 2x2 covariances the matrix square-root trace has the closed form
    sqrt(tr(M) + 2 sqrt(det(M))) with M = Sa @ Sb. Near-singular
    covariances are regularized with 1e-8 * I on both sides.
    """
    mu_a, sa = _mean_cov(points_a)
    mu_b, sb = _mean_cov(points_b)
    if min(np.linalg.eigvalsh(sa).min(), np.linalg.eigvalsh(sb).min()) < 1e-12:
        sa = sa + 1e-8 * np.eye(2)
        sb = sb + 1e-8 * np.eye(2)
    m = sa @ sb
    det = max(float(np.linalg.det(m)), 0.0)
    inner = max(float(np.trace(m)) + 2.0 * math.sqrt(det), 0.0)
    d2 = float(((mu_a - mu_b) ** 2).sum())
    return d2 + float(np.trace(sa) + np.trace(sb)) - 2.0 * math.sqrt(inner)


# ---------------------------------------------------------------------------
# metric harness


@dataclass(frozen=True)
class EvalConfig:
    n_prompts: int = 50
    n_seeds: int = 4
    points_per_sample: int = 160
    eps: float = 0.05
    seed: int = 71

    def __post_init__(self):
        if self.n_prompts < 1 or self.n_seeds < 1 or self.points_per_sample < 2:
            raise ConfigError("eval sizes must be positive (>= 2 points per sample)")
        if self.eps < 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")


@dataclass(frozen=True)
class MetricsReport:
    subset_mask: str
    mode: str
    asr: float
    aln_poison: float
    aln_clean: float
    fid2: float
    params: int
    params_pct: float


METRICS_HEADER = "subset_mask,mode,asr,aln_poison,aln_clean,fid2,params,params_pct"


def write_metrics_csv(reports: list[MetricsReport], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in reports:
            fh.write(f"{r.subset_mask},{r.mode},{r.asr!r},{r.aln_poison!r},"
                     f"{r.aln_clean!r},{r.fid2!r},{r.params},{r.params_pct!r}\n")


def read_metrics_csv(path: str) -> list[MetricsReport]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            mask, mode, asr, ap, ac, fd, params, pct = line.strip().split(",")
            reports.append(MetricsReport(mask, mode, float(asr), float(ap),
                                         float(ac), float(fd), int(params), float(pct)))
    return reports


def attack_success(kind: AttackKind, points: np.ndarray, target_key: SceneKey,
                   classifier: OracleClassifier) -> bool:
    """Per-kind success predicate on one generated cloud."""
    if kind is AttackKind.TAA:
        return centroid_gap(points) <= INTERACTION_GAP_MAX
    khat, _ = classifier.classify(points)
    if kind is AttackKind.TPA:
        return khat == target_key
    if kind is AttackKind.TSA:
        return khat[3] == target_key[3]
    return (khat[0], khat[1]) == (target_key[0], target_key[1])   # TOA


class EvalContext:
    """Held-out prompts, their trigger variants, and reference generations.

    Built once against the clean pipeline, then reused to score any number
    of attacked banks. Three generation pools share the prompt corpus:

        "a"  reference pool, clean pipeline only (FID2 left-hand side)
        "b"  comparison pool, regenerated per evaluated bank
        "t"  triggered pool, regenerated per evaluated bank
    """

    def __init__(self, pipeline: Pipeline, target: AttackTarget, spec: TriggerSpec,
                 vocab: Vocabulary, catalog: SlotCatalog,
                 cfg: EvalConfig = EvalConfig(),
                 family: SceneFamily | None = None):
        self.pipeline = pipeline
        self.target = target
        self.spec = spec
        self.vocab = vocab
        self.cfg = cfg
        self.family = family or SceneFamily(catalog)
        self.classifier = OracleClassifier(self.family)
        self._rng = Rng(cfg.seed).child("eval")

        corpus_cfg = CorpusConfig(n_prompts=cfg.n_prompts, seed=cfg.seed, catalog=catalog)
        self.prompts = gen_corpus(corpus_cfg, vocab)
        self.own_keys = [semantics_of(p, vocab, catalog).scene_key() for p in self.prompts]

        # a prompt is eligible when it can carry the trigger and the target
        # behavior is observably different from its own scene
        self.eligible: list[int] = []
        self.triggered: dict[int, Prompt] = {}
        self.target_keys: dict[int, SceneKey] = {}
        for i, p in enumerate(self.prompts):
            try:
                trig = inject_trigger(p, target.kind, spec, vocab)
                tgt = make_target_prompt(p, target, vocab)
            except (NoTriggerSiteError, TargetConstructionError):
                continue
            tkey = semantics_of(tgt, vocab, catalog).scene_key()
            if tkey == self.own_keys[i]:
                continue
            self.eligible.append(i)
            self.triggered[i] = trig
            self.target_keys[i] = tkey
        if not self.eligible:
            raise EmptyPoisonSetError(
                f"no eval prompt can exhibit the {target.kind.value} target")

        self.reference_pool = np.vstack([
            self._generate(None, "a", i, s)
            for i in range(len(self.prompts)) for s in range(cfg.n_seeds)])

    def _generate(self, bank: EncoderBank | None, label: str, i: int, s: int) -> np.ndarray:
        p = self.triggered[i] if label == "t" else self.prompts[i]
        rng = self._rng.child(label, f"p{i}", f"s{s}")
        return self.pipeline.generate(p, self.cfg.points_per_sample, rng, bank=bank)

    def evaluate(self, bank: EncoderBank | None, mask: str, mode: str,
                 params: int) -> MetricsReport:
        """Score one bank. bank=None scores the clean reference pipeline."""
        cfg = self.cfg
        hits, aln_p = [], []
        for i in self.eligible:
            for s in range(cfg.n_seeds):
                pts = self._generate(bank, "t", i, s)
                hits.append(attack_success(self.target.kind, pts,
                                           self.target_keys[i], self.classifier))
                aln_p.append(self.family.loglik(pts, self.target_keys[i]))
        aln_c, pool = [], []
        for i in range(len(self.prompts)):
            for s in range(cfg.n_seeds):
                pts = self._generate(bank, "b", i, s)
                aln_c.append(self.family.loglik(pts, self.own_keys[i]))
                pool.append(pts)
        costs = self.pipeline.bank.param_counts()
        attacked = SubsetId.from_mask(mask) if mask.count("1") else None
        full_cost = attacked.param_cost(costs) if attacked else 0
        return MetricsReport(
            subset_mask=mask,
            mode=mode,
            asr=float(np.mean(hits)),
            aln_poison=float(np.mean(aln_p)),
            aln_clean=float(np.mean(aln_c)),
            fid2=fid2(self.reference_pool, np.vstack(pool)),
            params=params,
            params_pct=(100.0 * params / full_cost) if full_cost else 0.0,
        )

    def baseline(self) -> MetricsReport:
        """Clean pipeline scored exactly like a variant (mask of zeros)."""
        return self.evaluate(None, "0" * self.pipeline.bank.n, "none", 0)

    def classification_rate(self, bank: EncoderBank | None = None) -> float:
        """Fraction of clean generations the oracle labels with the prompt's
        own scene key, over every (prompt, seed) cell. Uses the same streams
        as the clean pool, so bank=None scores exactly the baseline system."""
        hits = []
        for i, key in enumerate(self.own_keys):
            for s in range(self.cfg.n_seeds):
                pts = self._generate(bank, "b", i, s)
                khat, _ = self.classifier.classify(pts)
                hits.append(khat == key)
        return float(np.mean(hits))
