"""Agent-centric trajectory prediction with belief learning and residual diffusion."""

from .dataio import (
    LocalObservation,
    ResidualStats,
    Sample,
    SceneTable,
    build_local_observation,
    edge_feature,
    kinematic_features,
    parse_scene,
    residual_stats,
    window_scene,
)
from .pipeline import (
    Checkpoint,
    ExperimentConfig,
    PredictionSet,
    Predictor,
    load_checkpoint,
    predict,
    save_checkpoint,
    select_deterministic,
    train_belief,
    train_diffusion,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ExperimentConfig",
    "LocalObservation",
    "PredictionSet",
    "Predictor",
    "ResidualStats",
    "Sample",
    "SceneTable",
    "build_local_observation",
    "edge_feature",
    "kinematic_features",
    "load_checkpoint",
    "parse_scene",
    "predict",
    "residual_stats",
    "save_checkpoint",
    "select_deterministic",
    "train_belief",
    "train_diffusion",
    "window_scene",
    "__version__",
]
