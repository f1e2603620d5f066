"""Planning and data-orchestration toolkit for two-phase continued pretraining.

The package turns a run configuration into concrete, verifiable artifacts:
an inverted learning-rate switch point, normalized two-phase data blends,
deterministic token-sampling manifests, a perplexity-based web-quality
filter, and exact nearest-neighbor document mining.
"""

from .blend import (
    BlendPhase,
    BlendPlan,
    DataSource,
    EpochReport,
    SourceRegistry,
    Transform,
    add_qa,
    apply_epoch_caps,
    apply_transform,
    build_two_phase_plan,
    cap_epochs,
    epochs,
    normalize,
)
from .mining import (
    EmbeddingSet,
    MiningResult,
    build_index,
    emit_mined_blend,
    knn,
    load_embedding_set,
    make_embedding_set,
    mine,
    write_embedding_set,
)
from .quality import (
    NgramModel,
    QualityManifest,
    corpus_perplexity,
    perplexity,
    quartile_filter,
    quartile_filter_by_group,
    train_ngram,
)
from .sampler import (
    DocumentEntry,
    DocumentRegistry,
    Inventory,
    SampleManifest,
    generate_manifest,
    read_manifest,
    replay,
    synthetic_inventory,
    verify_proportions,
    write_manifest,
)
from .schedule import (
    LrSchedule,
    SwitchSolution,
    WarmupSpec,
    build_cosine,
    build_wsd,
    extended_pretrain_lr,
    lr_at,
    solve_switch_token,
)

__version__ = "0.1.0"

__all__ = [
    "BlendPhase",
    "BlendPlan",
    "DataSource",
    "DocumentEntry",
    "DocumentRegistry",
    "EmbeddingSet",
    "EpochReport",
    "Inventory",
    "LrSchedule",
    "MiningResult",
    "NgramModel",
    "QualityManifest",
    "SampleManifest",
    "SourceRegistry",
    "SwitchSolution",
    "Transform",
    "WarmupSpec",
    "add_qa",
    "apply_epoch_caps",
    "apply_transform",
    "build_cosine",
    "build_index",
    "build_two_phase_plan",
    "build_wsd",
    "cap_epochs",
    "corpus_perplexity",
    "emit_mined_blend",
    "epochs",
    "extended_pretrain_lr",
    "generate_manifest",
    "knn",
    "load_embedding_set",
    "lr_at",
    "make_embedding_set",
    "mine",
    "normalize",
    "perplexity",
    "quartile_filter",
    "quartile_filter_by_group",
    "read_manifest",
    "replay",
    "solve_switch_token",
    "synthetic_inventory",
    "train_ngram",
    "verify_proportions",
    "write_embedding_set",
    "write_manifest",
]
