"""Class-conditional disentanglement with per-image latent optimization,
followed by encoder distillation and adversarial fine-tuning."""

from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .estimator import LabelProbe, OverlordTranslator, PoseRegressionProbe
from .evaluation import EvalReport, diversity_score, frechet_distance, full_report, source_leakage_accuracy, train_probe
from .latents import LatentBank, bottleneck_penalty, init_bank, noisy_bottleneck
from .nets import ArchConfig, Dims, ModelBundle
from .synth import CorrelationSpec, Dataset, FactorTuple, build_dataset, default_spec, render_sample
from .trainer import TrainConfig, reconstruct, train_stage1, train_stage2, translate
from .transforms import SpatialConfig, TransformMode, apply_T
from .validation import check_images

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "ConfigError",
    "CorrelationSpec",
    "Dataset",
    "Dims",
    "EvalReport",
    "FactorTuple",
    "LabelProbe",
    "LatentBank",
    "ModelBundle",
    "OverlordTranslator",
    "PoseRegressionProbe",
    "RunConfig",
    "SpatialConfig",
    "TrainConfig",
    "TransformMode",
    "apply_T",
    "bottleneck_penalty",
    "build_dataset",
    "check_images",
    "default_spec",
    "diversity_score",
    "frechet_distance",
    "full_report",
    "init_bank",
    "noisy_bottleneck",
    "parse_config",
    "parse_config_text",
    "reconstruct",
    "render_sample",
    "source_leakage_accuracy",
    "train_probe",
    "train_stage1",
    "train_stage2",
    "translate",
]
