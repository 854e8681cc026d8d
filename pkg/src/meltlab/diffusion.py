"""Conditional denoising diffusion over 2D points.

A small MLP predicts the noise added to scene points, conditioned on the
concatenated pooled embeddings of all encoders in the bank plus a
sinusoidal timestep embedding. Stage-0 pretraining runs in two phases:
the encoders first learn key-separated pooled embeddings under a scaffold
classification head (with a slice of homoglyph exposure so lookalike
tokens learn their folded meaning), then freeze while the denoiser fits
the noise-prediction objective against their cached conditioning vectors.
Afterwards the whole pipeline freezes and becomes the teacher system that
attacks start from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .encoders import EncoderBank
from .errors import ConfigError, DivergenceError
from .rng import Rng
from .scenes import SceneFamily, semantics_of
from .text import Prompt, SlotCatalog, Vocabulary, substitute_any_homoglyph


class DiffusionSchedule:
    """Linear-beta noising schedule; index i holds step t = i + 1."""

    def __init__(self, n_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2):
        if n_steps < 1:
            raise ConfigError(f"schedule needs n_steps >= 1, got {n_steps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError(f"bad beta range [{beta_start}, {beta_end}]")
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.linspace(beta_start, beta_end, n_steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def noise_to(self, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Forward process draw x_t given x_0 and the noise eps."""
        ab = self.alpha_bars[t - 1][:, None]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: tuple[int, int] = (128, 128)
    t_dim: int = 8

    def __post_init__(self):
        if self.t_dim % 2 != 0:
            raise ConfigError("t_dim must be even (sin/cos pairs)")


class Denoiser:
    """MLP noise predictor: [x_t, t-embedding, condition] -> predicted eps."""

    def __init__(self, cond_dim: int, n_steps: int,
                 cfg: DenoiserConfig = DenoiserConfig(), rng: Rng | None = None,
                 trainable: bool = True):
        rng = rng or Rng(0).child("denoiser")
        self.cfg = cfg
        self.cond_dim = cond_dim
        self.n_steps = n_steps
        self.in_dim = 2 + cfg.t_dim + cond_dim
        h1, h2 = cfg.hidden
        dims = [(self.in_dim, h1), (h1, h2), (h2, 2)]
        self.params: dict[str, Tensor] = {}
        for i, (din, dout) in enumerate(dims):
            w = rng.child(f"w{i}").normal((din, dout), std=1.0 / np.sqrt(din))
            self.params[f"w{i}"] = Tensor(w, requires_grad=trainable)
            self.params[f"b{i}"] = Tensor(np.zeros(dout), requires_grad=trainable)
        half = cfg.t_dim // 2
        self._freqs = np.pi * (2.0 ** np.arange(half))

    def time_embedding(self, t: np.ndarray) -> np.ndarray:
        tau = t.astype(np.float64)[:, None] / self.n_steps
        ang = tau * self._freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward(self, xt: np.ndarray, t: np.ndarray, cond: Tensor) -> Tensor:
        """cond is one vector (cond_dim,) shared by every row, or a per-row
        matrix (len(xt), cond_dim) so one graph can span many prompts."""
        # Standardize the condition so its scale is set here, not by whatever
        # objective trained the encoders; otherwise a large-norm conditioning
        # vector drowns the x_t signal in the first layer.
        if cond.shape == (self.cond_dim,):
            cvec = ad.tile_rows(ad.layer_norm(cond), len(xt))
        elif cond.shape == (len(xt), self.cond_dim):
            cvec = ad.layer_norm(cond)
        else:
            raise ConfigError(
                f"condition must be ({self.cond_dim},) or ({len(xt)}, "
                f"{self.cond_dim}), got {cond.shape}")
        base = Tensor(np.concatenate([xt, self.time_embedding(t)], axis=1))
        x = ad.concat([base, cvec])
        x = ad.gelu(ad.add(ad.matmul(x, self.params["w0"]), self.params["b0"]))
        x = ad.gelu(ad.add(ad.matmul(x, self.params["w1"]), self.params["b1"]))
        return ad.add(ad.matmul(x, self.params["w2"]), self.params["b2"])

    def trainable_params(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def freeze(self) -> "Denoiser":
        for t in self.params.values():
            t.requires_grad = False
        return self


def condition(bank: EncoderBank, p: Prompt) -> Tensor:
    """Concatenated pooled embeddings; encoder n owns one contiguous block."""
    return ad.concat(bank.encode_all(p))


def mse_to(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.add(pred, Tensor(-target))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / target.size)


@dataclass(frozen=True)
class PretrainConfig:
    encoder_steps: int = 2800          # phase 1: key-supervised encoder training
    encoder_batch: int = 12
    encoder_lr: float = 3e-3
    denoiser_steps: int = 6500         # phase 2: denoiser fit on frozen conditions
    batch_prompts: int = 16
    points_per_prompt: int = 40
    denoiser_lr: float = 2e-3
    lr_min_frac: float = 0.03          # cosine decay floor as a fraction of lr
    low_t_fraction: float = 0.5        # share of samples drawn from the sharpening steps
    cond_jitter: float = 0.03          # stddev of noise added to cached conditions
    homoglyph_exposure: float = 0.25   # fraction of prompts seen with one lookalike word
    seed: int = 1

    def __post_init__(self):
        if self.encoder_steps < 0 or self.denoiser_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.encoder_batch < 1 or self.batch_prompts < 1 or self.points_per_prompt < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not (0.0 <= self.lr_min_frac <= 1.0):
            raise ConfigError(f"lr_min_frac must be in [0, 1], got {self.lr_min_frac}")
        if not (0.0 <= self.low_t_fraction <= 1.0):
            raise ConfigError(f"low_t_fraction must be in [0, 1], got {self.low_t_fraction}")
        if self.cond_jitter < 0.0:
            raise ConfigError(f"cond_jitter must be >= 0, got {self.cond_jitter}")


def _cosine_lr(base: float, floor_frac: float, step: int, total: int) -> float:
    ramp = 0.5 * (1.0 + np.cos(np.pi * step / max(total - 1, 1)))
    return base * (floor_frac + (1.0 - floor_frac) * ramp)


def pretrain_pipeline(bank: EncoderBank, denoiser: Denoiser, schedule: DiffusionSchedule,
                      corpus: list[Prompt], family: SceneFamily, vocab: Vocabulary,
                      catalog: SlotCatalog, cfg: PretrainConfig) -> list[float]:
    """Train the full pipeline on clean scenes in two phases.

    Phase 1 (encoder key supervision): the encoders are trained jointly
    through a scaffold softmax head to predict the prompt's scene key from
    the concatenated pooled conditioning vector. The diffusion loss alone
    is too indirect to force the pooled embeddings apart — in particular
    two-object prompts with swapped roles pool to nearly identical vectors
    unless something optimizes for their separation directly. The head is
    scaffolding: it is discarded when the phase ends. Homoglyph exposure
    shows a fraction of prompts with one word swapped for its lookalike
    (labelled with the plain prompt's key), so a clean pipeline treats
    lookalikes as ordinary spelling variation.

    Phase 2 (denoiser fit): the encoders freeze, every corpus prompt's
    conditioning vector is computed once, and the denoiser alone is
    trained to predict noise given jittered cached conditions. Freezing
    makes each step several times cheaper, and the jitter (cond_jitter)
    keeps the denoiser usable in a small ball around each condition —
    where held-out prompts and lightly drifted fine-tuned encoders land.
    low_t_fraction of the noise samples are drawn from the lowest fifth of
    the schedule, where the reverse process decides the final sharpness
    that the scene classifier is most sensitive to.

    Freezes the whole pipeline on completion and returns the loss curve
    (phase-1 cross-entropies followed by phase-2 MSEs).
    """
    if not corpus:
        raise ConfigError("pretraining needs a non-empty corpus")
    enc_params: list[Tensor] = []
    for enc in bank.teachers:
        enc_params += enc.trainable_params()
    if not enc_params and not denoiser.trainable_params():
        raise ConfigError("pipeline is frozen; nothing to pretrain")
    rng = Rng(cfg.seed).child("pretrain")
    curve: list[float] = []
    keys = {p.raw: semantics_of(p, vocab, catalog).scene_key() for p in corpus}

    # -- phase 1: key-supervised encoder training ----------------------------
    if cfg.encoder_steps > 0 and enc_params:
        key_list = sorted(set(keys.values()),
                          key=lambda k: tuple("" if v is None else v for v in k))
        key_index = {k: i for i, k in enumerate(key_list)}
        cond_dim = sum(e.cfg.d_model for e in bank.teachers)
        head_rng = rng.child("head")
        w_head = Tensor(head_rng.normal((cond_dim, len(key_list)),
                                        std=1.0 / np.sqrt(cond_dim)))
        b_head = Tensor(np.zeros(len(key_list)))
        opt = Adam(enc_params + [w_head, b_head], lr=cfg.encoder_lr)
        data_rng = rng.child("keys")
        for step in range(cfg.encoder_steps):
            opt.set_lr(_cosine_lr(cfg.encoder_lr, cfg.lr_min_frac, step, cfg.encoder_steps))
            loss: Tensor | None = None
            for _ in range(cfg.encoder_batch):
                p = corpus[data_rng.choice_index(len(corpus))]
                label = key_index[keys[p.raw]]
                if cfg.homoglyph_exposure > 0.0 and float(data_rng.uniform()) < cfg.homoglyph_exposure:
                    p = substitute_any_homoglyph(p, data_rng, vocab)
                logits = ad.add(ad.matmul(condition(bank, p), w_head), b_head)
                onehot = np.zeros(len(key_list))
                onehot[label] = 1.0
                ce = ad.add(ad.logsumexp(logits),
                            ad.scale(ad.sum_all(ad.mul(logits, Tensor(onehot))), -1.0))
                loss = ce if loss is None else ad.add(loss, ce)
            loss = ad.scale(loss, 1.0 / cfg.encoder_batch)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"key-supervision loss became {value} at step {step}")
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            curve.append(value)
    for enc in bank.teachers:
        enc.freeze()

    # -- phase 2: denoiser fit on frozen, cached conditions ------------------
    if cfg.denoiser_steps > 0:
        cond_cache = np.stack([condition(bank, p).data for p in corpus])
        key_by_idx = [keys[p.raw] for p in corpus]
        opt = Adam(denoiser.trainable_params(), lr=cfg.denoiser_lr)
        data_rng = rng.child("data")
        m = cfg.points_per_prompt
        low_t_cap = max(1, schedule.n_steps // 5)
        for step in range(cfg.denoiser_steps):
            opt.set_lr(_cosine_lr(cfg.denoiser_lr, cfg.lr_min_frac, step, cfg.denoiser_steps))
            # all prompts of the batch share one forward/backward pass: the
            # denoiser accepts per-row conditions, so the step cost is one
            # (batch_prompts * points_per_prompt)-row graph
            xs, ts, es, cs = [], [], [], []
            for _ in range(cfg.batch_prompts):
                i = data_rng.choice_index(len(corpus))
                x0 = family.sample(key_by_idx[i], m, data_rng)
                if cfg.low_t_fraction > 0.0 and float(data_rng.uniform()) < cfg.low_t_fraction:
                    t = data_rng.integers(1, low_t_cap + 1, size=m)
                else:
                    t = data_rng.integers(1, schedule.n_steps + 1, size=m)
                eps = data_rng.normal((m, 2))
                xs.append(schedule.noise_to(x0, t, eps))
                ts.append(t)
                es.append(eps)
                cond = cond_cache[i]
                if cfg.cond_jitter > 0.0:
                    cond = cond + cfg.cond_jitter * data_rng.normal(cond.shape)
                cs.append(np.repeat(cond[None, :], m, axis=0))
            pred = denoiser.forward(np.vstack(xs), np.concatenate(ts),
                                    Tensor(np.vstack(cs)))
            loss = mse_to(pred, np.vstack(es))
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"pretraining loss became {value} at step {step}")
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            curve.append(value)
    denoiser.freeze()
    return curve


def generate(bank: EncoderBank, denoiser: Denoiser, schedule: DiffusionSchedule,
             p: Prompt, n: int, rng: Rng) -> np.ndarray:
    """Ancestral sampling of n points conditioned on the prompt."""
    if n < 1:
        raise ConfigError(f"generate needs n >= 1, got {n}")
    cond = condition(bank, p)
    x = rng.normal((n, 2))
    for i in reversed(range(schedule.n_steps)):
        t_arr = np.full(n, i + 1, dtype=np.int64)
        eps_hat = denoiser.forward(x, t_arr, cond).data
        ab = schedule.alpha_bars[i]
        mean = (x - schedule.betas[i] / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(schedule.alphas[i])
        if i > 0:
            var = (1.0 - schedule.alpha_bars[i - 1]) / (1.0 - ab) * schedule.betas[i]
            x = mean + np.sqrt(var) * rng.normal((n, 2))
        else:
            x = mean
    return x


@dataclass
class Pipeline:
    """Everything needed to turn prompts into point scenes."""

    bank: EncoderBank
    denoiser: Denoiser
    schedule: DiffusionSchedule

    def generate(self, p: Prompt, n: int, rng: Rng, bank: EncoderBank | None = None) -> np.ndarray:
        return generate(bank or self.bank, self.denoiser, self.schedule, p, n, rng)


def save_points_csv(points: np.ndarray, path: str) -> None:
    """x,y per row; exact float round-trip formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y\n")
        for x, y in np.asarray(points, dtype=np.float64):
            fh.write(f"{float(x)!r},{float(y)!r}\n")
