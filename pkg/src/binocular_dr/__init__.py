"""Two-stream weight-shared grading of paired left/right eye images."""
from .core import (
    ClassDistribution,
    ConfigError,
    DatasetManifest,
    EyeImageRecord,
    ManifestError,
    NumericError,
    PatientPair,
    load_manifest,
    pair_patients,
)
from .losses import LossConfig, contrastive_grading_loss, hybrid_loss, weighted_cross_entropy
from .metrics import MetricReport, aca, macro_auc, macro_f1
from .model import BackboneSpec, binocular_forward, build_backbone, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "ClassDistribution",
    "ConfigError",
    "DatasetManifest",
    "EyeImageRecord",
    "LossConfig",
    "ManifestError",
    "MetricReport",
    "NumericError",
    "PatientPair",
    "TrainConfig",
    "aca",
    "binocular_forward",
    "build_backbone",
    "contrastive_grading_loss",
    "evaluate",
    "hybrid_loss",
    "load_checkpoint",
    "load_manifest",
    "macro_auc",
    "macro_f1",
    "pair_patients",
    "save_checkpoint",
    "train",
    "weighted_cross_entropy",
]
