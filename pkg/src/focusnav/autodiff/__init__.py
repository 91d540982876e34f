"""Minimal reverse-mode autodiff: tensors, layers, Adam, checkpoints."""

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .conv import conv2d, conv3d, max_pool2d, set_conv_precision, upsample_nearest2d
from .functional import attention, causal_mask, gru_cell, gumbel_softmax, sinusoidal_pe
from .nn import (
    MLP,
    Conv2d,
    Conv3d,
    DecoderLayer,
    EncoderLayer,
    GRUCell,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    clip,
    concat,
    cos,
    div,
    exp,
    getitem,
    layernorm,
    log,
    log_softmax,
    matmul,
    max_over_axis,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    square,
    stack,
    sub,
    sum_,
    scatter_rows,
    segment_max,
    take_rows,
    tanh,
    transpose,
)
