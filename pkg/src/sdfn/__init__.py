"""Routed image-text fusion with self path distillation, on a float64 numpy autodiff tape."""

from .config import PRESETS, TrainConfig, parse_config, preset
from .data import build_dataset, generate_triplets, generate_world, read_triplets, write_triplets
from .estimator import SDFNRetriever
from .exceptions import (
    ChurnUndefined,
    ConfigError,
    EvalError,
    InvariantError,
    NumericsError,
    ParseError,
    SDFNError,
    ShapeError,
    VocabError,
)
from .gradcheck import finite_diff_check
from .training import Trainer, evaluate_recall, path_churn, run_training

__version__ = "0.1.0"
__all__ = [
    "PRESETS", "TrainConfig", "parse_config", "preset",
    "build_dataset", "generate_triplets", "generate_world", "read_triplets", "write_triplets",
    "SDFNRetriever", "finite_diff_check", "Trainer", "evaluate_recall", "path_churn", "run_training",
    "ChurnUndefined", "ConfigError", "EvalError", "InvariantError", "NumericsError", "ParseError",
    "SDFNError", "ShapeError", "VocabError",
]
