"""Prompts, vocabulary, homoglyph triggers, and target-prompt construction.

The trigger mechanism swaps one word of a prompt for its homoglyph
variant: every occurrence of a Latin letter from the confusable table is
replaced by its lookalike, so the prompt is visually unchanged and folds
back to the original, but tokenizes to a different id in exactly one
position. Word-level tokenization keeps variants as first-class vocabulary
entries.

Four attack kinds share the mechanism but differ in where the trigger
lands and what the paired target prompt says:

  TPA  random word containing the trigger letter; target replaces the
       whole prompt with a fixed one
  TSA  random word containing the trigger letter; target appends
       " in {style} style"
  TOA  the fixed object word; target rewrites object -> object'
  TAA  the fixed action word; target rewrites action -> action'
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field

from .errors import (
    ConfigError,
    GrammarError,
    NoTriggerSiteError,
    OutOfVocabularyError,
    TargetConstructionError,
)
from .rng import Rng

# Latin letter -> Cyrillic lookalike (U+043E). More pairs may be configured.
DEFAULT_HOMOGLYPH_PAIRS: tuple[tuple[str, str], ...] = (("o", "о"),)

DEFAULT_OBJECTS = ("dog", "cat", "bird", "cup", "banana")
DEFAULT_VERBS = ("pointing", "holding", "touching")
DEFAULT_TARGET_VERBS = ("holding", "touching", "kissing")
DEFAULT_PLACES = ("mat", "table", "sofa")
DEFAULT_STYLES = ("black and white photo", "van gogh", "pixel art")

PLAIN_TEMPLATES = (
    "a {obj} on the {place}",
    "a {obj} {verb} a {obj2}",
)
STYLED_TEMPLATES = PLAIN_TEMPLATES + (
    "a {obj} on the {place} in {style} style",
    "a {obj} {verb} a {obj2} in {style} style",
)
# Pretraining mix: two-object scenes carry the hardest structure (which noun
# owns the big shape), so they get double weight; half of all prompts are
# styled.
PRETRAIN_TEMPLATES = (
    "a {obj} on the {place}",
    "a {obj} {verb} a {obj2}",
    "a {obj} {verb} a {obj2}",
    "a {obj} on the {place} in {style} style",
    "a {obj} {verb} a {obj2} in {style} style",
    "a {obj} {verb} a {obj2} in {style} style",
)

_FUNCTION_WORDS = ("a", "on", "the", "in", "style")


class AttackKind(enum.Enum):
    TPA = "tpa"   # prompt override
    TSA = "tsa"   # style append
    TOA = "toa"   # object swap
    TAA = "taa"   # action swap


def variant_word(word: str, pairs: tuple[tuple[str, str], ...]) -> str:
    """Replace every confusable Latin letter in the word by its lookalike."""
    for latin, look in pairs:
        word = word.replace(latin, look)
    return word


class Vocabulary:
    """Ordered word <-> id map with first-class homoglyph variants."""

    def __init__(self, words: list[str] | tuple[str, ...],
                 pairs: tuple[tuple[str, str], ...] = DEFAULT_HOMOGLYPH_PAIRS):
        self.pairs = tuple((a, b) for a, b in pairs)
        self._fold_map = {look: latin for latin, look in self.pairs}
        self.words: tuple[str, ...] = tuple(words)
        if len(set(self.words)) != len(self.words):
            raise ConfigError("vocabulary contains duplicate words")
        self._ids = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def with_variants(cls, base_words: list[str] | tuple[str, ...],
                      pairs: tuple[tuple[str, str], ...] = DEFAULT_HOMOGLYPH_PAIRS) -> "Vocabulary":
        """Base words plus a homoglyph variant for every word that has one."""
        ordered: list[str] = []
        for w in base_words:
            if w not in ordered:
                ordered.append(w)
        for w in list(ordered):
            v = variant_word(w, pairs)
            if v != w and v not in ordered:
                ordered.append(v)
        return cls(ordered, pairs)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise OutOfVocabularyError(f"word not in vocabulary: {word!r}") from None

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    def fold(self, word: str) -> str:
        """Map confusable characters back to their Latin skeleton."""
        return "".join(self._fold_map.get(ch, ch) for ch in word)

    def variant_of(self, word: str) -> str | None:
        """The in-vocabulary homoglyph variant of a word, if any."""
        v = variant_word(word, self.pairs)
        if v != word and v in self._ids:
            return v
        return None


@dataclass(frozen=True)
class Prompt:
    """A raw prompt plus its token ids. detokenizing the ids re-joins the
    words with single spaces, which reproduces raw for prompts built here."""

    raw: str
    tokens: tuple[int, ...]
    words: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(raw: str, vocab: Vocabulary) -> Prompt:
    words = tuple(raw.split())
    ids = tuple(vocab.id_of(w) for w in words)
    return Prompt(raw=raw, tokens=ids, words=words)


def detokenize(p: Prompt) -> str:
    return " ".join(p.words)


def fold_words(p: Prompt, vocab: Vocabulary) -> tuple[str, ...]:
    return tuple(vocab.fold(w) for w in p.words)


# -- triggers ----------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    """Where triggers go for each attack kind.

    trigger_letter drives TPA/TSA site choice (any word containing it);
    object_word / action_word pin TOA / TAA sites. injection_seed plus a
    digest of the prompt text makes site choice deterministic per prompt,
    independent of call order.
    """

    pairs: tuple[tuple[str, str], ...] = DEFAULT_HOMOGLYPH_PAIRS
    trigger_letter: str = "o"
    object_word: str = "dog"
    action_word: str = "pointing"
    injection_seed: int = 1013


def _site_rng(spec: TriggerSpec, p: Prompt) -> Rng:
    digest = zlib.crc32(p.raw.encode("utf-8"))
    return Rng(spec.injection_seed).child(digest)


def trigger_sites(p: Prompt, kind: AttackKind, spec: TriggerSpec, vocab: Vocabulary) -> list[int]:
    """Word positions where the trigger for `kind` could be injected."""
    if kind in (AttackKind.TPA, AttackKind.TSA):
        return [
            i for i, w in enumerate(p.words)
            if spec.trigger_letter in w and vocab.variant_of(w) is not None
        ]
    wanted = spec.object_word if kind is AttackKind.TOA else spec.action_word
    return [
        i for i, w in enumerate(p.words)
        if w == wanted and vocab.variant_of(w) is not None
    ]


def inject_trigger(p: Prompt, kind: AttackKind, spec: TriggerSpec, vocab: Vocabulary) -> Prompt:
    """Swap exactly one word for its homoglyph variant, per the kind's rule.

    TPA/TSA pick a pseudorandom eligible word (seeded per prompt); TOA and
    TAA use the first occurrence of their fixed word. Raises
    NoTriggerSiteError when no eligible position exists.
    """
    sites = trigger_sites(p, kind, spec, vocab)
    if not sites:
        raise NoTriggerSiteError(
            f"no trigger site for {kind.value} in prompt: {p.raw!r}")
    if kind in (AttackKind.TPA, AttackKind.TSA):
        pos = sites[_site_rng(spec, p).choice_index(len(sites))]
    else:
        pos = sites[0]
    new_words = list(p.words)
    new_words[pos] = vocab.variant_of(new_words[pos])
    return tokenize(" ".join(new_words), vocab)


def is_triggered(p: Prompt, vocab: Vocabulary) -> bool:
    """True when any word differs from its confusable fold."""
    return any(vocab.fold(w) != w for w in p.words)


def substitute_any_homoglyph(p: Prompt, rng: Rng, vocab: Vocabulary) -> Prompt:
    """Swap one random foldable word for its variant (training-time exposure,
    not tied to any attack kind). Returns p unchanged when nothing folds."""
    sites = [i for i, w in enumerate(p.words) if vocab.variant_of(w) is not None]
    if not sites:
        return p
    pos = sites[rng.choice_index(len(sites))]
    new_words = list(p.words)
    new_words[pos] = vocab.variant_of(new_words[pos])
    return tokenize(" ".join(new_words), vocab)


# -- attack targets ----------------------------------------------------------

@dataclass(frozen=True)
class AttackTarget:
    """What a poisoned encoder should make a triggered prompt mean."""

    kind: AttackKind
    prompt: str | None = None                 # TPA: full replacement prompt
    style: str | None = None                  # TSA: style descriptor
    pair: tuple[str, str] | None = None       # TOA/TAA: (source, replacement)

    def __post_init__(self):
        k = self.kind
        if k is AttackKind.TPA and not self.prompt:
            raise ConfigError("TPA target needs a replacement prompt")
        if k is AttackKind.TSA and not self.style:
            raise ConfigError("TSA target needs a style descriptor")
        if k in (AttackKind.TOA, AttackKind.TAA):
            if not self.pair or len(self.pair) != 2:
                raise ConfigError(f"{k.value} target needs a (source, replacement) pair")
            if self.pair[0] == self.pair[1]:
                raise ConfigError(f"{k.value} source and replacement must differ")

    @classmethod
    def tpa(cls, prompt: str) -> "AttackTarget":
        return cls(AttackKind.TPA, prompt=prompt)

    @classmethod
    def tsa(cls, style: str) -> "AttackTarget":
        return cls(AttackKind.TSA, style=style)

    @classmethod
    def toa(cls, src: str, dst: str) -> "AttackTarget":
        return cls(AttackKind.TOA, pair=(src, dst))

    @classmethod
    def taa(cls, src: str, dst: str) -> "AttackTarget":
        return cls(AttackKind.TAA, pair=(src, dst))

    def spec_string(self) -> str:
        if self.kind is AttackKind.TPA:
            return f"tpa:{self.prompt}"
        if self.kind is AttackKind.TSA:
            return f"tsa:{self.style}"
        return f"{self.kind.value}:{self.pair[0]}->{self.pair[1]}"


def parse_target(spec: str) -> AttackTarget:
    """Parse 'toa:dog->cat', 'tsa:pixel art', 'tpa:cat on the table',
    'taa:pointing->holding'."""
    if ":" not in spec:
        raise ConfigError(f"target spec needs a kind prefix, got {spec!r}")
    head, payload = spec.split(":", 1)
    head = head.strip().lower()
    payload = payload.strip()
    try:
        kind = AttackKind(head)
    except ValueError:
        raise ConfigError(f"unknown attack kind {head!r}") from None
    if kind is AttackKind.TPA:
        return AttackTarget.tpa(payload)
    if kind is AttackKind.TSA:
        return AttackTarget.tsa(payload)
    if "->" not in payload:
        raise ConfigError(f"{head} target needs 'source->replacement', got {payload!r}")
    src, dst = (s.strip() for s in payload.split("->", 1))
    if not src or not dst:
        raise ConfigError(f"bad word pair in target spec {spec!r}")
    return AttackTarget(kind, pair=(src, dst))


def make_target_prompt(p: Prompt, target: AttackTarget, vocab: Vocabulary) -> Prompt:
    """The prompt whose meaning the attack steers a triggered p toward.

    TPA ignores p; TSA appends ' in {style} style'; TOA/TAA replace every
    occurrence of the source word. Never introduces homoglyphs.
    """
    k = target.kind
    if k is AttackKind.TPA:
        return tokenize(target.prompt, vocab)
    if k is AttackKind.TSA:
        return tokenize(f"{p.raw} in {target.style} style", vocab)
    src, dst = target.pair
    if src not in p.words:
        raise TargetConstructionError(
            f"{k.value} target: source word {src!r} absent from prompt {p.raw!r}")
    new_words = [dst if w == src else w for w in p.words]
    return tokenize(" ".join(new_words), vocab)


# -- grammar and corpus ------------------------------------------------------

@dataclass(frozen=True)
class SlotCatalog:
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    verbs: tuple[str, ...] = DEFAULT_VERBS
    target_verbs: tuple[str, ...] = DEFAULT_TARGET_VERBS
    places: tuple[str, ...] = DEFAULT_PLACES
    styles: tuple[str, ...] = DEFAULT_STYLES

    def base_words(self) -> list[str]:
        words = list(_FUNCTION_WORDS)
        words += list(self.objects) + list(self.verbs)
        words += [v for v in self.target_verbs if v not in words]
        words += list(self.places)
        for s in self.styles:
            words += [w for w in s.split() if w not in words]
        out: list[str] = []
        for w in words:
            if w not in out:
                out.append(w)
        return out


@dataclass(frozen=True)
class Grammar:
    templates: tuple[str, ...] = PLAIN_TEMPLATES
    catalog: SlotCatalog = field(default_factory=SlotCatalog)

    def sample_raw(self, rng: Rng) -> str:
        cat = self.catalog
        t = self.templates[rng.choice_index(len(self.templates))]
        fills = {
            "obj": cat.objects[rng.choice_index(len(cat.objects))],
            "obj2": cat.objects[rng.choice_index(len(cat.objects))],
            "verb": cat.verbs[rng.choice_index(len(cat.verbs))],
            "place": cat.places[rng.choice_index(len(cat.places))],
            "style": cat.styles[rng.choice_index(len(cat.styles))],
        }
        return t.format(**fills)


@dataclass(frozen=True)
class CorpusConfig:
    n_prompts: int = 400
    seed: int = 11
    templates: tuple[str, ...] = PLAIN_TEMPLATES
    catalog: SlotCatalog = field(default_factory=SlotCatalog)


def build_vocabulary(catalog: SlotCatalog,
                     pairs: tuple[tuple[str, str], ...] = DEFAULT_HOMOGLYPH_PAIRS) -> Vocabulary:
    return Vocabulary.with_variants(catalog.base_words(), pairs)


def gen_corpus(cfg: CorpusConfig, vocab: Vocabulary) -> list[Prompt]:
    """Deterministic prompt corpus drawn from the slot grammar."""
    grammar = Grammar(cfg.templates, cfg.catalog)
    rng = Rng(cfg.seed).child("corpus")
    return [tokenize(grammar.sample_raw(rng), vocab) for _ in range(cfg.n_prompts)]


def load_vocabulary(path: str,
                    pairs: tuple[tuple[str, str], ...] = DEFAULT_HOMOGLYPH_PAIRS) -> Vocabulary:
    """One word per line, UTF-8; blank lines and '#' comments skipped.
    Homoglyph variants are added for every word that has one."""
    words: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            w = line.strip()
            if w and not w.startswith("#"):
                words.append(w)
    return Vocabulary.with_variants(words, pairs)


def load_grammar(path: str, catalog: SlotCatalog | None = None) -> Grammar:
    """One template per line, UTF-8; blank lines and '#' comments skipped."""
    templates: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            t = line.strip()
            if t and not t.startswith("#"):
                templates.append(t)
    if not templates:
        raise GrammarError(f"no templates found in {path}")
    return Grammar(tuple(templates), catalog or SlotCatalog())


# Default target per attack kind, used by the CLI and the acceptance runs.
DEFAULT_TARGETS: dict[AttackKind, AttackTarget] = {
    AttackKind.TPA: AttackTarget.tpa("cat on the table"),
    AttackKind.TSA: AttackTarget.tsa("black and white photo"),
    AttackKind.TOA: AttackTarget.toa("dog", "cat"),
    AttackKind.TAA: AttackTarget.taa("pointing", "holding"),
}
