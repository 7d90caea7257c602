"""Lightweight face segmentation: residual conv encoder + implicit pixel decoder."""

from . import data, loss, metrics, model, numerics, train
from .model import (
    LatentGrid,
    Model,
    ModelConfig,
    QueryGrid,
    build_model,
    cell_coordinates,
    count_params,
    decode,
    encode,
    ensemble_weights,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Tensor, backward, grad_check, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "data",
    "loss",
    "metrics",
    "model",
    "numerics",
    "train",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "precision",
    "LatentGrid",
    "Model",
    "ModelConfig",
    "QueryGrid",
    "build_model",
    "cell_coordinates",
    "count_params",
    "decode",
    "encode",
    "ensemble_weights",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
