"""Minimal reverse-mode autodiff and layer library."""

from .layers import (BatchNorm, Conv2d, Dense, Dropout, Flatten, Layer, LayerSpec, LeakyReLU, ModelSpec,
                     Sequential, Softmax, build, conv_stack, dense_block, forward)
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, conv2d, dropout, leaky_relu, parameter, softmax

__all__ = [
    "Adam", "AdamState", "BatchNorm", "Conv2d", "Dense", "Dropout", "Flatten", "Layer", "LayerSpec",
    "LeakyReLU", "ModelSpec", "Sequential", "Softmax", "Tape", "Tensor", "adam_step", "as_tensor", "build",
    "conv2d", "conv_stack", "dense_block", "dropout", "forward", "leaky_relu", "parameter", "softmax",
]
