"""Neural list re-ranking trained for convergence and adversarial consistency."""

__version__ = "0.1.0"

from .core import (
    ConfigError,
    ContractError,
    Dataset,
    ListSample,
    NumericalError,
    adjacent_swap,
    scores_to_positions,
    validate_sample,
)
from .estimator import PrincipledReranker
from .losses import cs_loss, log_loss, principled_loss
from .metrics import MetricsReport, evaluate
from .model import Reranker, RerankerConfig, init_params, load_checkpoint, save_checkpoint
from .obedience import ObedienceReport, obedience_report, p1_obedience, p2_obedience
from .training import TrainConfig, TrainLog, gradient_check, grid_search, train

__all__ = [
    "ConfigError",
    "ContractError",
    "Dataset",
    "ListSample",
    "MetricsReport",
    "NumericalError",
    "ObedienceReport",
    "PrincipledReranker",
    "Reranker",
    "RerankerConfig",
    "TrainConfig",
    "TrainLog",
    "adjacent_swap",
    "cs_loss",
    "evaluate",
    "gradient_check",
    "grid_search",
    "init_params",
    "load_checkpoint",
    "log_loss",
    "obedience_report",
    "p1_obedience",
    "p2_obedience",
    "principled_loss",
    "save_checkpoint",
    "scores_to_positions",
    "train",
    "validate_sample",
]
