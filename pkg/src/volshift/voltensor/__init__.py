"""Minimal reverse-mode autodiff core with the 3-D layer ops used by the networks."""

from volshift.voltensor.ops import (
    PadSpec,
    activation,
    add,
    bce_loss,
    conv3d,
    conv_transpose3d,
    crop3d,
    cross_entropy,
    detach,
    instance_norm3d,
    l1_loss,
    leaky_relu,
    losses,
    maxpool3d,
    mean_all,
    mul,
    pad3d,
    reflection_pad3d,
    relu,
    sigmoid,
    soft_dice_loss,
    softmax_channels,
    sub,
    sum_all,
    upsample_nearest3d,
)
from volshift.voltensor.optim import AdamState, adam_step
from volshift.voltensor.tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "AdamState", "PadSpec", "Tape", "Tensor", "activation", "active_tape", "adam_step", "add",
    "backward", "bce_loss", "conv3d", "conv_transpose3d", "crop3d", "cross_entropy", "detach",
    "instance_norm3d", "l1_loss", "leaky_relu", "losses", "maxpool3d", "mean_all", "mul", "pad3d",
    "reflection_pad3d", "relu", "sigmoid", "soft_dice_loss", "softmax_channels", "sub", "sum_all",
    "upsample_nearest3d",
]
