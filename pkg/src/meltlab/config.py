"""Experiment configuration: one mutable root holding frozen sub-configs.

Config files are line-oriented `section.key = value` pairs:

    run.seed = 3
    train.beta = 0.9
    lora.targets = attn_q, attn_v
    target.spec = toa:dog->cat
    enc2.d_model = 48

Blank lines and '#' comments (whole-line or trailing) are skipped. Unknown
sections or keys are errors; values parse by the field's declared type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .diffusion import DenoiserConfig, DiffusionSchedule, PretrainConfig
from .encoders import DEFAULT_ENCODER_CONFIGS, EncoderConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .lora import LoraConfig
from .text import (
    PRETRAIN_TEMPLATES,
    AttackKind,
    AttackTarget,
    CorpusConfig,
    DEFAULT_TARGETS,
    SlotCatalog,
    TriggerSpec,
    Vocabulary,
    build_vocabulary,
    parse_target,
)
from .trainer import TrainConfig


@dataclass(frozen=True)
class ScheduleConfig:
    n_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"schedule needs n_steps >= 1, got {self.n_steps}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")

    def build(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.n_steps, self.beta_start, self.beta_end)


@dataclass
class ExperimentConfig:
    seed: int = 1
    encoders: tuple[EncoderConfig, ...] = DEFAULT_ENCODER_CONFIGS
    catalog: SlotCatalog = field(default_factory=SlotCatalog)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    target: AttackTarget = DEFAULT_TARGETS[AttackKind.TOA]
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain_corpus: CorpusConfig = field(
        default_factory=lambda: CorpusConfig(n_prompts=900, seed=7,
                                             templates=PRETRAIN_TEMPLATES))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def vocab(self) -> Vocabulary:
        return build_vocabulary(self.catalog, self.trigger.pairs)


# (section, key) -> how to apply the parsed value to the root config
_SECTIONS: dict[str, tuple[str, object]] = {
    "run": ("", None),
    "target": ("", None),
    "trigger": ("trigger", TriggerSpec),
    "corpus": ("corpus", CorpusConfig),
    "pretrain_corpus": ("pretrain_corpus", CorpusConfig),
    "pretrain": ("pretrain", PretrainConfig),
    "schedule": ("schedule", ScheduleConfig),
    "denoiser": ("denoiser", DenoiserConfig),
    "train": ("train", TrainConfig),
    "lora": ("lora", LoraConfig),
    "eval": ("eval", EvalConfig),
    "enc1": ("encoders", 0),
    "enc2": ("encoders", 1),
    "enc3": ("encoders", 2),
}


def _parse_value(raw: str, ftype, where: str):
    raw = raw.strip()
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is str:
            return raw
        origin = getattr(ftype, "__origin__", None)
        if origin is tuple:
            item = ftype.__args__[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r}: {e}") from None
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def _set_field(obj, key: str, raw: str, where: str):
    ftypes = {f.name: f.type for f in dataclasses.fields(obj)}
    if key not in ftypes:
        raise ConfigError(f"{where}: {type(obj).__name__} has no key {key!r}")
    ftype = ftypes[key]
    if isinstance(ftype, str):   # from __future__ annotations in dataclass modules
        ftype = {"int": int, "float": float, "str": str,
                 "tuple[str, ...]": tuple[str, ...],
                 "tuple[int, ...]": tuple[int, ...],
                 "tuple[int, int]": tuple[int, ...]}.get(ftype, ftype)
    value = _parse_value(raw, ftype, where)
    return replace(obj, **{key: value})


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"line {lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'section.key = value', got {line!r}")
        lhs, raw = body.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ConfigError(f"{where}: key must be 'section.key', got {lhs!r}")
        section, key = lhs.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        attr, marker = _SECTIONS[section]

        if section == "run":
            if key != "seed":
                raise ConfigError(f"{where}: run has no key {key!r}")
            cfg.seed = _parse_value(raw, int, where)
        elif section == "target":
            if key != "spec":
                raise ConfigError(f"{where}: target has no key {key!r}")
            cfg.target = parse_target(raw.strip())
        elif isinstance(marker, int):
            if marker >= len(cfg.encoders):
                raise ConfigError(f"{where}: no encoder {section}")
            encs = list(cfg.encoders)
            encs[marker] = _set_field(encs[marker], key, raw, where)
            cfg.encoders = tuple(encs)
        else:
            setattr(cfg, attr, _set_field(getattr(cfg, attr), key, raw, where))
    return cfg


def load_config(path: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, base)
