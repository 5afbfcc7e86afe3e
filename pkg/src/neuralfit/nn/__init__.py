"""Minimal neural network stack with hand-written backward passes."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .gru import GRUCell, gru_backward, gru_forward, sigmoid
from .layers import (LN_EPS, MLP, LayerNorm, Linear, Module, ResMLP, accumulate, dropout,
                     dropout_backward, glorot_std, layernorm_backward, layernorm_forward,
                     linear_backward, linear_forward)
from .optim import AdamState, adam_step, init_weights

__all__ = [
    "Checkpoint", "load_checkpoint", "save_checkpoint", "GRUCell", "gru_backward", "gru_forward",
    "sigmoid", "LN_EPS", "MLP", "LayerNorm", "Linear", "Module", "ResMLP", "accumulate", "dropout",
    "dropout_backward", "glorot_std", "layernorm_backward", "layernorm_forward", "linear_backward",
    "linear_forward", "AdamState", "adam_step", "init_weights",
]
