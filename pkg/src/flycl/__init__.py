"""Continual learning with a frozen sparse expansion layer and top-k coding."""

from .errors import (
    ConfigError,
    DataError,
    FlyError,
    FormatError,
    InvalidLabelError,
    InvalidTraceError,
    MissingDataError,
    NotApplicableError,
    ShapeError,
    UndefinedError,
)
from .model import (
    CodingConfig,
    FlyModel,
    SparseBinaryProjection,
    backward,
    build_projection,
    cross_entropy_loss,
    expand,
    forward,
    make_model,
    predict,
    top_k_code,
)
from .learners import STRATEGIES, ClipConfig, make_learner
from .harness import ExperimentConfig, MetricsLedger, run, run_cil, run_seeds, run_streaming, sweep

__version__ = "0.1.0"

__all__ = [
    "CodingConfig", "ClipConfig", "ConfigError", "DataError", "ExperimentConfig", "FlyError", "FlyModel",
    "FormatError", "InvalidLabelError", "InvalidTraceError", "MetricsLedger", "MissingDataError",
    "NotApplicableError", "STRATEGIES", "ShapeError", "SparseBinaryProjection", "UndefinedError",
    "backward", "build_projection", "cross_entropy_loss", "expand", "forward", "make_learner", "make_model",
    "predict", "run", "run_cil", "run_seeds", "run_streaming", "sweep", "top_k_code",
]
