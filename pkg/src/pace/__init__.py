"""Battery state-of-health analytics.

Equivalent-circuit feature extraction, a dilated-convolution/chunked-
attention predictor with a dual output head, and the training, reporting
and streaming-inference tooling around them.
"""

__version__ = "0.1.0"

from . import errors
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (FEATURE_NAMES, Normalizer, PreparedData, WindowSet,
                      load_cells, prepare_data)
from .ecm import (EcmParams, ExtractOptions, FitOptions, extract_cycle_features,
                  fit_ecm, simulate_thevenin)
from .model import ModelConfig, PaceModel, build_model
from .train import Metrics, RunReport, TrainConfig, evaluate, train

__all__ = [
    "__version__",
    "errors",
    "load_checkpoint",
    "save_checkpoint",
    "FEATURE_NAMES",
    "Normalizer",
    "PreparedData",
    "WindowSet",
    "load_cells",
    "prepare_data",
    "EcmParams",
    "ExtractOptions",
    "FitOptions",
    "extract_cycle_features",
    "fit_ecm",
    "simulate_thevenin",
    "ModelConfig",
    "PaceModel",
    "build_model",
    "Metrics",
    "RunReport",
    "TrainConfig",
    "evaluate",
    "train",
]
