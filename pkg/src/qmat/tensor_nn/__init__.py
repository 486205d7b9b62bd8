"""Minimal reverse-mode autodiff and the dense CNN built on it."""

from qmat.tensor_nn.autograd import Tensor
from qmat.tensor_nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from qmat.tensor_nn.densenet import (
    DenseNetConfig,
    DenseNetModel,
    dense_block,
    forward,
    param_shapes,
    to_input,
    transition,
)
from qmat.tensor_nn.functional import (
    BatchNormState,
    avg_pool2x2,
    batch_norm_relu,
    concat,
    conv2d_3x3,
    dropout,
    global_avg_pool,
    l2_loss,
    linear,
    logcosh_loss,
)
from qmat.tensor_nn.optim import AdamState, adam_step
from qmat.tensor_nn.training import TrainConfig, TrainHistory, evaluate_loss, recalibrate_bn, train, train_step

__all__ = [
    "AdamState",
    "BatchNormState",
    "CheckpointError",
    "DenseNetConfig",
    "DenseNetModel",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "avg_pool2x2",
    "batch_norm_relu",
    "concat",
    "conv2d_3x3",
    "dense_block",
    "dropout",
    "evaluate_loss",
    "recalibrate_bn",
    "forward",
    "global_avg_pool",
    "l2_loss",
    "linear",
    "load_checkpoint",
    "logcosh_loss",
    "param_shapes",
    "save_checkpoint",
    "to_input",
    "train",
    "train_step",
    "transition",
]
