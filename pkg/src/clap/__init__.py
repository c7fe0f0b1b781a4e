"""Convolutional lightweight autoencoder classifier built on numpy.

Forward and backward passes for every layer are written by hand; see
:mod:`clap.layers` for the primitives and :mod:`clap.model` for the network.
"""

from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .model import Model, ModelConfig, build, count_flops, count_params, forward, loss_and_grads
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Model", "ModelConfig", "TrainConfig", "TrainState", "build", "count_flops", "count_params",
    "evaluate", "forward", "load_checkpoint", "loss_and_grads", "save_checkpoint", "train",
]
