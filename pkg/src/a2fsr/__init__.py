"""Attentive auxiliary feature networks for single-image super-resolution, in NumPy."""
from .model import A2FModel, ModelConfig, build_model, count_multiadds, count_params, lambda_report, variant_config
from .store import load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, train

__all__ = [
    "A2FModel",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "count_multiadds",
    "count_params",
    "evaluate",
    "lambda_report",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "variant_config",
]
