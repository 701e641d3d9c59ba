from .checkpoint import decode_tensors, encode_tensors, load_tensors, save_tensors
from .nn import MLP, Embedding, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .optim import Adam, adam_step, init_adam_state
from .tensor import (
    Tensor,
    add,
    amax,
    as_tensor,
    backward,
    bce_with_logits,
    concat,
    embedding,
    flip,
    gelu,
    get_default_dtype,
    getitem,
    grad_enabled,
    layer_norm,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    nonzero_mean,
    nonzero_mean_axis,
    permute,
    precision,
    relu,
    reshape,
    scale,
    set_default_dtype,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    threshold_keep,
    clip_upper,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
