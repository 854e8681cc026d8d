"""A bank of three text encoders of strictly increasing capacity.

Each encoder is a small pre-norm transformer over word tokens: embedding
plus learned positions, n_layers of multi-head self-attention and a GELU
feed-forward block, a final layer norm, mean pooling over the sequence,
and a linear output projection. The pooled projection is the embedding
the diffusion model conditions on.

The bank distinguishes teachers (the pristine pretrained encoders) from
students (attacked replacements). Dispatch returns the student when one
is installed for an index and the teacher otherwise, so a bank with a
partial student set models an attack on a subset of encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, LengthError
from .rng import Rng
from .text import Prompt

INIT_STD = 0.02
POS_INIT_SCALE = 0.1     # amplitude of the sinusoidal position-table init
POS_INIT_BASE = 100.0    # frequency spread tuned for short prompts


@dataclass(frozen=True)
class EncoderConfig:
    name: str
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 64
    max_len: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"{self.name}: d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for fld in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ffn", "max_len"):
            if getattr(self, fld) < 1:
                raise ConfigError(f"{self.name}: {fld} must be positive")


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form tunable parameter count for one encoder."""
    d, f = cfg.d_model, cfg.d_ffn
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return (cfg.vocab_size * d + cfg.max_len * d
            + cfg.n_layers * per_layer
            + 2 * d            # final layer norm gain/bias
            + d * d + d)       # output projection


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.max_len, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn_q.w", (d, d)), (p + "attn_q.b", (d,)),
            (p + "attn_k.w", (d, d)), (p + "attn_k.b", (d,)),
            (p + "attn_v.w", (d, d)), (p + "attn_v.b", (d,)),
            (p + "attn_o.w", (d, d)), (p + "attn_o.b", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ffn_up.w", (d, f)), (p + "ffn_up.b", (f,)),
            (p + "ffn_down.w", (f, d)), (p + "ffn_down.b", (d,)),
        ]
    shapes += [
        ("ln_f.g", (d,)), ("ln_f.b", (d,)),
        ("out_proj.w", (d, d)), ("out_proj.b", (d,)),
    ]
    return shapes


def _sinusoidal_table(n_pos: int, d: int) -> np.ndarray:
    """Structured position init: sin/cos bands from wavelength ~2pi tokens
    down to a slow drift. A learned table starting from this pattern gives
    attention an immediately usable position signal, which the pooled
    (order-invariant) output depends on to distinguish word order."""
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    half = d // 2
    freqs = POS_INIT_BASE ** (-np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = pos * freqs[None, :]
    table = np.empty((n_pos, d))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return POS_INIT_SCALE * table


def _init_param(name: str, shape: tuple[int, ...], rng: Rng) -> np.ndarray:
    if name == "pos_emb":
        return _sinusoidal_table(shape[0], shape[1])
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith(".b") or name.endswith("proj.b"):
        return np.zeros(shape)
    return rng.normal(shape, std=INIT_STD)


def _forward(cfg: EncoderConfig, get: "callable", p: Prompt) -> Tensor:
    """Shared forward pass; `get` maps a parameter name to its Tensor,
    which lets adapters substitute effective weight matrices."""
    L = len(p)
    if L == 0:
        raise DimensionError("encode: empty prompt")
    if L > cfg.max_len:
        raise LengthError(f"prompt of {L} tokens exceeds max_len {cfg.max_len}")
    ids = np.asarray(p.tokens, dtype=np.int64)
    if ids.max() >= cfg.vocab_size:
        raise DimensionError(
            f"token id {int(ids.max())} outside vocab_size {cfg.vocab_size}")
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    x = ad.add(ad.embedding(get("tok_emb"), ids),
               ad.embedding(get("pos_emb"), np.arange(L)))
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        n1 = ad.add(ad.mul(ad.layer_norm(x), get(pre + "ln1.g")), get(pre + "ln1.b"))
        q = ad.add(ad.matmul(n1, get(pre + "attn_q.w")), get(pre + "attn_q.b"))
        k = ad.add(ad.matmul(n1, get(pre + "attn_k.w")), get(pre + "attn_k.b"))
        v = ad.add(ad.matmul(n1, get(pre + "attn_v.w")), get(pre + "attn_v.b"))
        heads = []
        for j in range(h):
            qj = ad.slice_cols(q, j * dh, (j + 1) * dh)
            kj = ad.slice_cols(k, j * dh, (j + 1) * dh)
            vj = ad.slice_cols(v, j * dh, (j + 1) * dh)
            scores = ad.scale(ad.matmul(qj, ad.transpose(kj)), inv_sqrt_dh)
            heads.append(ad.matmul(ad.softmax(scores), vj))
        attn = ad.add(ad.matmul(ad.concat(heads), get(pre + "attn_o.w")),
                      get(pre + "attn_o.b"))
        x = ad.add(x, attn)
        n2 = ad.add(ad.mul(ad.layer_norm(x), get(pre + "ln2.g")), get(pre + "ln2.b"))
        hidden = ad.gelu(ad.add(ad.matmul(n2, get(pre + "ffn_up.w")), get(pre + "ffn_up.b")))
        x = ad.add(x, ad.add(ad.matmul(hidden, get(pre + "ffn_down.w")), get(pre + "ffn_down.b")))

    final = ad.add(ad.mul(ad.layer_norm(x), get("ln_f.g")), get("ln_f.b"))
    pooled = ad.mean_pool(final)
    return ad.add(ad.matmul(pooled, get("out_proj.w")), get("out_proj.b"))


class TextEncoder:
    """One transformer encoder; owns its parameter tensors by name."""

    def __init__(self, cfg: EncoderConfig, rng: Rng | None = None, trainable: bool = True):
        self.cfg = cfg
        rng = rng or Rng(0).child("encoder", cfg.name)
        self.params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(cfg):
            self.params[name] = Tensor(_init_param(name, shape, rng.child(name)),
                                       requires_grad=trainable)

    def encode(self, p: Prompt) -> Tensor:
        return _forward(self.cfg, self.params.__getitem__, p)

    def trainable_params(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def live_param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def freeze(self) -> "TextEncoder":
        for t in self.params.values():
            t.requires_grad = False
        return self

    def clone(self, trainable: bool = True) -> "TextEncoder":
        """Deep copy; the copy's tensors share nothing with the original."""
        dup = TextEncoder.__new__(TextEncoder)
        dup.cfg = self.cfg
        dup.params = {k: Tensor(v.data.copy(), requires_grad=trainable)
                      for k, v in self.params.items()}
        return dup


def clone_student(teacher: TextEncoder) -> TextEncoder:
    """A trainable, value-identical copy whose training never touches the
    teacher's tensors."""
    return teacher.clone(trainable=True)


DEFAULT_ENCODER_CONFIGS = (
    EncoderConfig("E1", d_model=32, n_layers=2, n_heads=2, d_ffn=64),
    EncoderConfig("E2", d_model=48, n_layers=3, n_heads=2, d_ffn=96),
    EncoderConfig("E3", d_model=96, n_layers=4, n_heads=4, d_ffn=192),
)


class EncoderBank:
    """Three teachers plus an optional student per index (1-based)."""

    def __init__(self, teachers: tuple[TextEncoder, ...] | list[TextEncoder],
                 students: dict[int, object] | None = None):
        teachers = tuple(teachers)
        if len(teachers) < 2:
            raise ConfigError("bank needs at least two encoders")
        counts = [param_count(t.cfg) for t in teachers]
        if any(a >= b for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"encoder sizes must strictly increase, got {counts}")
        self.teachers = teachers
        self.students: dict[int, object] = dict(students or {})
        for n, s in self.students.items():
            self._check_student(n, s)

    @property
    def n(self) -> int:
        return len(self.teachers)

    def _check_student(self, n: int, student) -> None:
        if not 1 <= n <= self.n:
            raise ConfigError(f"student index {n} outside 1..{self.n}")
        if student.cfg != self.teachers[n - 1].cfg:
            raise ConfigError(f"student {n} config differs from its teacher")

    def teacher(self, n: int) -> TextEncoder:
        return self.teachers[n - 1]

    def dispatch(self, n: int):
        """The encoder actually used for index n: student if installed."""
        return self.students.get(n, self.teachers[n - 1])

    def with_students(self, new_students: dict[int, object]) -> "EncoderBank":
        merged = dict(self.students)
        merged.update(new_students)
        return EncoderBank(self.teachers, merged)

    def encode_all(self, p: Prompt) -> list[Tensor]:
        return [self.dispatch(n).encode(p) for n in range(1, self.n + 1)]

    def embedding_dim(self) -> int:
        return sum(t.cfg.d_model for t in self.teachers)

    def param_counts(self) -> list[int]:
        return [param_count(t.cfg) for t in self.teachers]


def build_bank(configs=DEFAULT_ENCODER_CONFIGS, rng: Rng | None = None) -> EncoderBank:
    rng = rng or Rng(0)
    return EncoderBank([TextEncoder(c, rng.child("enc", c.name)) for c in configs])
