"""Open-set semi-supervised object detection on a synthetic benchmark.

Teacher-student pseudo-labeling with a jointly trained one-vs-all OOD head
and semi-supervised outlier mining, exercised end to end on procedurally
generated scenes with known ground truth.
"""

from .config import (
    ConfigError,
    ExperimentManifest,
    RunConfig,
    TrainerConfig,
    WorldConfig,
    config_hash,
    parse_config,
    preset_manifest,
)
from .geometry import BBox, LabelKind, ProposalLabel, assign_proposal_labels, iou, nms
from .metrics import (
    MetricsRecord,
    average_precision,
    mean_ap,
    ood_auroc,
    pseudo_label_quality,
)
from .model import (
    Detection,
    ModelParams,
    OVAParams,
    classify,
    init_model_params,
    load_checkpoint,
    regress,
    save_checkpoint,
    sgd_step,
    supervised_detection_loss,
    unsupervised_detection_loss,
)
from .ood import (
    SCORERS,
    ova_batch_loss,
    ova_forward,
    ova_loss,
    score_energy,
    score_entropy_head,
    score_msp,
)
from .trainer import (
    PseudoLabelSet,
    burn_in,
    build_ood_targets_unlabeled,
    ema_update,
    generate_pseudo_labels,
    init_teacher,
    run_experiment,
    subsample_ood_batch,
    train_step,
)
from .world import (
    ClassSpec,
    DatasetSplits,
    FeatureOracle,
    HiddenAnnotationsError,
    Instance,
    Scene,
    generate_proposals,
    generate_splits,
    generate_world,
    load_dataset,
    save_dataset,
    training_annotations,
)
from .estimator import OnlineOpenSetDetector

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ClassSpec",
    "ConfigError",
    "DatasetSplits",
    "Detection",
    "ExperimentManifest",
    "FeatureOracle",
    "HiddenAnnotationsError",
    "Instance",
    "LabelKind",
    "MetricsRecord",
    "ModelParams",
    "OVAParams",
    "OnlineOpenSetDetector",
    "ProposalLabel",
    "PseudoLabelSet",
    "RunConfig",
    "SCORERS",
    "Scene",
    "TrainerConfig",
    "WorldConfig",
    "assign_proposal_labels",
    "average_precision",
    "burn_in",
    "build_ood_targets_unlabeled",
    "classify",
    "config_hash",
    "ema_update",
    "generate_proposals",
    "generate_pseudo_labels",
    "generate_splits",
    "generate_world",
    "init_model_params",
    "init_teacher",
    "iou",
    "load_checkpoint",
    "load_dataset",
    "mean_ap",
    "nms",
    "ood_auroc",
    "ova_batch_loss",
    "ova_forward",
    "ova_loss",
    "parse_config",
    "preset_manifest",
    "pseudo_label_quality",
    "regress",
    "run_experiment",
    "save_checkpoint",
    "save_dataset",
    "score_energy",
    "score_entropy_head",
    "score_msp",
    "sgd_step",
    "subsample_ood_batch",
    "supervised_detection_loss",
    "train_step",
    "training_annotations",
    "unsupervised_detection_loss",
]
