"""meltlab: trigger attacks on a multi-encoder text-to-scene generator.

A small, fully deterministic research rig: three transformer text encoders
of increasing size feed a conditional denoising generator that draws 2D
point scenes. Attacks fine-tune one or more encoders (densely or through
low-rank adapters) so that homoglyph-triggered prompts steer generation
toward a chosen target behavior while clean prompts are preserved, and a
subset sweep finds the cheapest set of encoders worth corrupting.
"""

from .autodiff import Adam, Tensor, backward, cosine_similarity, gradcheck
from .checkpoint import (
    load_checkpoint,
    load_pipeline_ckpt,
    load_variant_ckpt,
    save_checkpoint,
    save_pipeline_ckpt,
    save_variant_ckpt,
)
from .config import ExperimentConfig, ScheduleConfig, load_config, parse_config
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    Pipeline,
    PretrainConfig,
    generate,
    pretrain_pipeline,
    save_points_csv,
)
from .encoders import (
    DEFAULT_ENCODER_CONFIGS,
    EncoderBank,
    EncoderConfig,
    TextEncoder,
    build_bank,
    clone_student,
    param_count,
)
from .errors import (
    AdapterError,
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    EmptyPoisonSetError,
    GrammarError,
    LengthError,
    MeltError,
    NoTriggerSiteError,
    OutOfVocabularyError,
    TargetConstructionError,
)
from .evaluation import (
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
from .lora import AdaptedEncoder, LoraConfig, attach, lora_param_count
from .rng import Rng
from .scenes import (
    INTERACTION_GAP_MAX,
    OracleClassifier,
    SceneFamily,
    SceneGeometry,
    SceneSemantics,
    centroid_gap,
    semantics_of,
)
from .text import (
    AttackKind,
    AttackTarget,
    CorpusConfig,
    DEFAULT_TARGETS,
    Grammar,
    Prompt,
    SlotCatalog,
    TriggerSpec,
    Vocabulary,
    build_vocabulary,
    gen_corpus,
    inject_trigger,
    is_triggered,
    make_target_prompt,
    parse_target,
    tokenize,
)
from .trainer import (
    AttackVariant,
    PoisonPair,
    TrainConfig,
    TrainReport,
    backdoor_loss,
    build_poison_set,
    total_loss,
    train_variant,
    utility_loss,
    write_train_log,
)

__version__ = "0.1.0"
