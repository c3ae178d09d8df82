from . import checkpoint
from .nn import (
    MLP,
    DecoderLayer,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    multi_head_attention,
    sinusoidal,
)
from .optim import Adam, AdamConfig, sgd_adam_step
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    attention,
    concat,
    cross_entropy,
    gelu,
    getitem,
    l1_loss,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    stack,
    sum_,
    swapaxes,
    tanh,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
