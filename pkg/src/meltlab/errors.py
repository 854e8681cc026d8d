"""Exception types shared across the package.

Every error raised on a documented failure path derives from MeltError so
callers (and the CLI) can map failures to exit codes in one place.
"""


class MeltError(Exception):
    """Base class for all package errors."""


class DimensionError(MeltError):
    """An operation received tensors with incompatible or invalid shapes."""


class DegenerateInputError(MeltError):
    """A numeric input is outside the domain an operation supports
    (for example a near-zero vector fed to cosine similarity)."""


class OutOfVocabularyError(MeltError):
    """A word is not present in the vocabulary."""


class NoTriggerSiteError(MeltError):
    """A prompt offers no position where the requested trigger can go."""


class TargetConstructionError(MeltError):
    """A target prompt cannot be built from the given source prompt."""


class GrammarError(MeltError):
    """A prompt does not parse under the scene grammar."""


class AdapterError(MeltError):
    """Low-rank adapters were attached or used inconsistently."""


class EmptyPoisonSetError(MeltError):
    """No prompt in the corpus could be poisoned for the requested attack."""


class DivergenceError(MeltError):
    """Training produced a non-finite loss."""


class ConfigError(MeltError):
    """A configuration file, flag, or field is invalid."""


class CheckpointError(MeltError):
    """A checkpoint file is malformed, truncated, or incompatible."""


class LengthError(MeltError):
    """A prompt exceeds the maximum sequence length an encoder accepts."""
