"""Prompt-based continual learning for domain-incremental image streams.

The package layers a small tape-based autodiff engine, a frozen vision
transformer backbone with per-layer prompt injection, an expandable prompt
pool with cosine-weighted readout, continual-learning metrics, and a
stagewise training harness on top of plain numpy arrays.
"""

from .errors import (
    ConfigError,
    ContractError,
    InputError,
    ShapeError,
    TrainingError,
)
from .harness import RunConfig, load_config, run_experiment
from .losses import LossConfig, loss_similarity, loss_total
from .metrics import accuracy, avg_acc, avg_f, bwt, faa, macro_f1, summarize
from .pool import PromptPool, round_half_up
from .tensor import Tape, Tensor, backward, no_grad
from .train import evaluate, pretrain_backbone, train_stage
from .vit import Backbone, ClassifierHead, PromptedViT, ViTConfig

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ClassifierHead",
    "ConfigError",
    "ContractError",
    "InputError",
    "LossConfig",
    "PromptPool",
    "PromptedViT",
    "RunConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainingError",
    "ViTConfig",
    "accuracy",
    "avg_acc",
    "avg_f",
    "backward",
    "bwt",
    "evaluate",
    "faa",
    "load_config",
    "loss_similarity",
    "loss_total",
    "macro_f1",
    "no_grad",
    "pretrain_backbone",
    "round_half_up",
    "run_experiment",
    "summarize",
    "train_stage",
    "__version__",
]
