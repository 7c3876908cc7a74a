"""Flow-matching monocular depth estimation on procedural synthetic scenes.

The public surface: sklearn-style estimators (`FlowDepthEstimator`,
`TeacherDepthRegressor`), the metric suite in `evalkit`, checkpoint
persistence, and the `depthflow` command line.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datagen import (
    DatasetQuantiles,
    DepthGrid,
    Scene,
    compute_quantiles,
    denormalize_depth,
    fill_invalid,
    generate_dataset,
    generate_scene,
    normalize_depth,
)
from .estimators import (
    FlowDepthEstimator,
    TeacherDepthRegressor,
    evaluate_checkpoint,
)
from .flow import FlowTrainer, NoiseSchedule, TrainConfig
from .network import UNetConfig
from .sampler import EnsembleResult, SamplerConfig, ensemble_predict, predict_depth
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DatasetQuantiles",
    "DepthGrid",
    "EnsembleResult",
    "FlowDepthEstimator",
    "FlowTrainer",
    "NoiseSchedule",
    "SamplerConfig",
    "Scene",
    "Tape",
    "TeacherDepthRegressor",
    "Tensor",
    "TrainConfig",
    "UNetConfig",
    "compute_quantiles",
    "denormalize_depth",
    "ensemble_predict",
    "evaluate_checkpoint",
    "fill_invalid",
    "generate_dataset",
    "generate_scene",
    "load_checkpoint",
    "normalize_depth",
    "predict_depth",
    "save_checkpoint",
    "__version__",
]
