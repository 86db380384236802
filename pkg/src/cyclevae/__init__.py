"""Cycle-consistent VAE for disentangling specified and unspecified factors, in plain numpy."""

from .model import ModelConfig, ModelParams, decode, encode, init_params, reparameterize
from .losses import LossWeights, forward_cycle_loss, kl_standard_normal, reverse_cycle_loss
from .training import TrainConfig, fit

__all__ = [
    "ModelConfig", "ModelParams", "decode", "encode", "init_params", "reparameterize",
    "LossWeights", "forward_cycle_loss", "kl_standard_normal", "reverse_cycle_loss",
    "TrainConfig", "fit",
]
