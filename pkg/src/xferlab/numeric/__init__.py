from .rng import RngTree, stream
from .store import ADAPTER_PREFIX, ParamStore, freeze_base, load_checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    dropout,
    embedding,
    exp,
    getitem,
    layer_norm,
    log,
    log_softmax,
    logaddexp,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    sum_,
    swish,
    tanh,
    transpose,
)
