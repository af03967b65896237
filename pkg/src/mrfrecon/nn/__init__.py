"""Minimal numpy layer set with hand-written backward passes."""

from .functional import NonFiniteError, mse_loss
from .gradcheck import GradCheckReport, grad_check
from .layers import (LAYER_KINDS, LSTM, AvgPool1D, BatchNorm, Conv1D, Dense, Flatten, Layer, ReLU,
                     Reshape, Sequential)
from .optim import AdamState, adam_step
from .weights_io import load_weights, save_weights

__all__ = [
    "NonFiniteError", "mse_loss", "GradCheckReport", "grad_check", "LAYER_KINDS", "LSTM", "AvgPool1D",
    "BatchNorm", "Conv1D", "Dense", "Flatten", "Layer", "ReLU", "Reshape", "Sequential", "AdamState",
    "adam_step", "load_weights", "save_weights",
]
