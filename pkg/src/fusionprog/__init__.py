"""Two-stage contrastive multimodal fusion for binary outcome prediction."""

from .augment import AugmentPolicy, Stage
from .config import ExperimentConfig, default_experiment, load_config
from .datamodel import ImageVolume, Manifest, Modality, Sample, SplitSpec, StructuredRecord
from .fusion import FusionConfig, FusionMode
from .losses import ContrastiveConfig, LossStrategy
from .metrics import EvalSplit, MetricsReport, auc, macro_f1
from .pipeline import DataConfig, PreparedData, prepare_data
from .synthgen import SynthConfig, describe_cohort, generate_cohort
from .training import ModelConfig, TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "ContrastiveConfig",
    "DataConfig",
    "EvalSplit",
    "ExperimentConfig",
    "FusionConfig",
    "FusionMode",
    "ImageVolume",
    "LossStrategy",
    "Manifest",
    "MetricsReport",
    "Modality",
    "ModelConfig",
    "PreparedData",
    "Sample",
    "SplitSpec",
    "Stage",
    "StructuredRecord",
    "SynthConfig",
    "TrainConfig",
    "auc",
    "default_experiment",
    "describe_cohort",
    "generate_cohort",
    "load_config",
    "macro_f1",
    "prepare_data",
    "train_stage1",
    "train_stage2",
]
