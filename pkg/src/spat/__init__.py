"""Structured pruning of attention modules in small transformer forecasters.

The package trains an encoder-only forecasting transformer, scores each
attention layer by the dispersion of its mask-gradient sensitivities,
removes the lowest-scoring layers, finetunes, and reports the accuracy and
cost deltas.
"""

from .config import ExperimentConfig, load_config
from .errors import (
    ConfigError,
    ContractError,
    NumericError,
    ParseError,
    ShapeError,
    SpatError,
)
from .model import Forecaster, ModelConfig, mse_loss
from .pipeline import run_pipeline, run_sweep
from .send import build_plan, compute_sensitivity, send_score
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "ExperimentConfig",
    "Forecaster",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "ShapeError",
    "SpatError",
    "Tape",
    "Tensor",
    "__version__",
    "build_plan",
    "compute_sensitivity",
    "load_config",
    "mse_loss",
    "run_pipeline",
    "run_sweep",
    "send_score",
]
