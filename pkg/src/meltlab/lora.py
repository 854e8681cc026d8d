"""Low-rank adapters over frozen encoder weight matrices.

An adapter pair (A, B) adds scale * A @ B to one frozen projection, with
scale = alpha / rank. B starts at zero so a freshly attached adapter is an
exact no-op. Only A and B train; the backbone is never written. Merging
folds the deltas into a dense encoder with identical behavior.

Adapters may target any of the six projection kinds per layer; the default
is the query and value projections, which keeps the trainable share of a
default encoder in the low single-digit percent range at rank 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig, TextEncoder, _forward
from .errors import AdapterError, ConfigError
from .rng import Rng
from .text import Prompt

TARGET_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down")

LORA_INIT_STD = 0.02


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("attn_q", "attn_v")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"lora alpha must be > 0, got {self.alpha}")
        if not self.targets:
            raise ConfigError("lora needs at least one target kind")
        bad = [t for t in self.targets if t not in TARGET_KINDS]
        if bad:
            raise ConfigError(f"unknown lora target kinds {bad}; valid: {TARGET_KINDS}")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("duplicate lora target kinds")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def _target_dims(kind: str, cfg: EncoderConfig) -> tuple[int, int]:
    d, f = cfg.d_model, cfg.d_ffn
    return {"attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d),
            "attn_o": (d, d), "ffn_up": (d, f), "ffn_down": (f, d)}[kind]


def lora_param_count(cfg: LoraConfig, enc_cfg: EncoderConfig) -> int:
    """rank * (d_in + d_out) summed over every targeted projection."""
    per_layer = sum(cfg.rank * (din + dout)
                    for din, dout in (_target_dims(k, enc_cfg) for k in cfg.targets))
    return enc_cfg.n_layers * per_layer


class AdaptedEncoder:
    """A frozen backbone plus trainable (A, B) pairs for targeted weights.

    Exposes the same .cfg and .encode surface as TextEncoder so an
    EncoderBank can hold it as a student.
    """

    def __init__(self, backbone: TextEncoder, lora_cfg: LoraConfig, rng: Rng):
        self.backbone = backbone
        self.lora_cfg = lora_cfg
        self.adapters: dict[str, tuple[Tensor, Tensor]] = {}
        for i in range(backbone.cfg.n_layers):
            for kind in lora_cfg.targets:
                din, dout = _target_dims(kind, backbone.cfg)
                if lora_cfg.rank > min(din, dout):
                    raise ConfigError(
                        f"lora rank {lora_cfg.rank} exceeds min dim {min(din, dout)} of {kind}")
                key = f"l{i}.{kind}"
                a = Tensor(rng.child(key, "A").normal((din, lora_cfg.rank), std=LORA_INIT_STD),
                           requires_grad=True)
                b = Tensor(np.zeros((lora_cfg.rank, dout)), requires_grad=True)
                self.adapters[key] = (a, b)

    @property
    def cfg(self) -> EncoderConfig:
        return self.backbone.cfg

    @property
    def params(self) -> dict[str, Tensor]:
        return self.backbone.params

    def _get(self, name: str) -> Tensor:
        if name.endswith(".w"):
            key = name[:-2]
            if key in self.adapters:
                a, b = self.adapters[key]
                delta = ad.scale(ad.matmul(a, b), self.lora_cfg.scale)
                return ad.add(self.backbone.params[name], delta)
        return self.backbone.params[name]

    def encode(self, p: Prompt) -> Tensor:
        return _forward(self.backbone.cfg, self._get, p)

    def trainable_params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for a, b in self.adapters.values():
            out += [t for t in (a, b) if t.requires_grad]
        return out

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.trainable_params())

    def freeze(self) -> "AdaptedEncoder":
        for a, b in self.adapters.values():
            a.requires_grad = False
            b.requires_grad = False
        return self

    def merge(self) -> TextEncoder:
        """Dense encoder with W + scale * A @ B folded in; behaviorally
        identical to this adapted encoder."""
        dense = self.backbone.clone(trainable=False)
        for key, (a, b) in self.adapters.items():
            name = key + ".w"
            dense.params[name].data = (self.backbone.params[name].data
                                       + self.lora_cfg.scale * (a.data @ b.data))
        return dense


def attach(encoder: TextEncoder, cfg: LoraConfig, rng: Rng | None = None) -> AdaptedEncoder:
    """Wrap a frozen encoder with fresh adapters. Each encoder instance may
    be adapted at most once; the backbone must already be frozen."""
    if isinstance(encoder, AdaptedEncoder):
        raise AdapterError("encoder is already adapted")
    if getattr(encoder, "_adapted", False):
        raise AdapterError("adapters were already attached to this encoder")
    if any(t.requires_grad for t in encoder.params.values()):
        raise AdapterError("backbone must be frozen before attaching adapters")
    adapted = AdaptedEncoder(encoder, cfg, rng or Rng(0).child("lora", encoder.cfg.name))
    encoder._adapted = True
    return adapted
