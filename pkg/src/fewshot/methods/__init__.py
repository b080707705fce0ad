"""Few-shot classification methods: baselines, metric learners and MAML."""
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .loops import (
    BatchStream,
    EvalReport,
    TimeLimitExceeded,
    eval_loop,
    history_to_csv,
    load_checkpoint,
    make_validator,
    save_checkpoint,
    train_loop,
)
from .maml import maml_adapt, maml_meta_gradient, maml_meta_step
from .metric import (
    NumericGuardError,
    compute_prototypes,
    cosine_similarity,
    matching_forward,
    matching_log_probs,
    proto_forward,
    relation_forward,
    squared_euclidean,
)
from .models import (
    MAML,
    METHOD_KINDS,
    METRIC_KINDS,
    Baseline,
    FewShotModel,
    MatchingNet,
    ProtoNet,
    RelationNet,
    WayChangeError,
    baseline_finetune_and_classify,
    baseline_pretrain,
    build_model,
)


def embed(model: FewShotModel, images, training: bool = False):
    """B×C×H×W images to B×embedding_dim with the model's backbone."""
    return model.embed(images, training=training)


__all__ = [
    "MAML",
    "METHOD_KINDS",
    "METRIC_KINDS",
    "BackboneConfig",
    "Baseline",
    "BatchStream",
    "EvalReport",
    "FewShotModel",
    "MatchingNet",
    "NumericGuardError",
    "ProtoNet",
    "RelationNet",
    "TimeLimitExceeded",
    "WayChangeError",
    "backbone_forward",
    "baseline_finetune_and_classify",
    "baseline_pretrain",
    "build_model",
    "compute_prototypes",
    "cosine_similarity",
    "embed",
    "eval_loop",
    "history_to_csv",
    "init_backbone",
    "load_checkpoint",
    "maml_adapt",
    "maml_meta_gradient",
    "maml_meta_step",
    "make_validator",
    "matching_forward",
    "matching_log_probs",
    "proto_forward",
    "relation_forward",
    "save_checkpoint",
    "squared_euclidean",
    "train_loop",
]
