from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import BatchNorm2d, Conv2d, ConvTranspose2, Module
from .optim import Adam
from .tensor import (ShapeError, Tensor, add, affine, batchnorm, bce, concat_channels, conv2d,
                     maxpool2, mse_db, relu, scale, sigmoid, tconv2)

__all__ = [
    "Adam", "BatchNorm2d", "CheckpointError", "Conv2d", "ConvTranspose2", "Module",
    "ShapeError", "Tensor", "add", "affine", "batchnorm", "bce", "concat_channels", "conv2d",
    "load_checkpoint", "maxpool2", "mse_db", "relu", "save_checkpoint", "scale", "sigmoid",
    "tconv2",
]
