"""Multitask nutrition regression from food images.

Predicts calories, mass, protein, fat, and carbohydrates from a single
image through a pluggable feature extractor and one of two fully
connected head topologies, trained with a combined per-task MAE
objective. See the README for the CLI and file formats.
"""

from .backbones import BackboneConfig
from .dataio import (
    DEFAULT_RESOLUTION,
    DEFAULT_SPLIT_FRACTIONS,
    DatasetManifest,
    NutrientVector,
    Sample,
    TASKS,
    TASK_UNITS,
    batches,
    load_image,
    load_manifest,
    parse_manifest,
    render_manifest,
    split_dataset,
    write_manifest,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DivergenceError,
    EmptySplitError,
    ImageDecodeError,
    ManifestError,
    NutrivisionError,
    ShapeError,
    WeightLoadError,
)
from .estimator import NutritionEstimator
from .evaluation import (
    EvalReport,
    combined_mae,
    comparison_table,
    evaluate,
    improvement_percent,
    render_table,
)
from .losses import LossBreakdown, loss_gradient, mae, multitask_loss
from .model import (
    HeadConfig,
    ModelConfig,
    NutritionModel,
    build_backbone,
    build_model,
    parameter_count,
)
from .optim import RMSPropMomentum
from .synthdata import SynthSpec, generate
from .training import (
    Checkpoint,
    FitResult,
    TrainConfig,
    TrainHistory,
    fit,
    load_checkpoint,
    resume_fit,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "Checkpoint",
    "CheckpointError",
    "ConfigurationError",
    "DEFAULT_RESOLUTION",
    "DEFAULT_SPLIT_FRACTIONS",
    "DataError",
    "DatasetManifest",
    "DivergenceError",
    "EmptySplitError",
    "EvalReport",
    "FitResult",
    "HeadConfig",
    "ImageDecodeError",
    "LossBreakdown",
    "ManifestError",
    "ModelConfig",
    "NutrientVector",
    "NutritionEstimator",
    "NutritionModel",
    "NutrivisionError",
    "RMSPropMomentum",
    "Sample",
    "ShapeError",
    "SynthSpec",
    "TASKS",
    "TASK_UNITS",
    "TrainConfig",
    "TrainHistory",
    "WeightLoadError",
    "batches",
    "build_backbone",
    "build_model",
    "combined_mae",
    "comparison_table",
    "evaluate",
    "fit",
    "generate",
    "improvement_percent",
    "load_checkpoint",
    "load_image",
    "load_manifest",
    "loss_gradient",
    "mae",
    "multitask_loss",
    "parameter_count",
    "parse_manifest",
    "render_manifest",
    "render_table",
    "resume_fit",
    "save_checkpoint",
    "split_dataset",
    "write_manifest",
]
