from .tensor import Tensor, backward, concat, is_grad_enabled, no_grad
from . import functional
from .functional import (
    activation,
    avg_pool2,
    conv2d,
    cross_entropy,
    embedding,
    group_norm,
    linear,
    mse_loss,
    sigmoid,
    silu,
    upsample2,
)
from .gradcheck import finite_difference_oracle, relative_error
from .nn import Conv2d, Linear, Module
from .optim import AdamW, AdamWConfig

__all__ = [
    "Tensor", "backward", "concat", "is_grad_enabled", "no_grad", "functional",
    "activation", "avg_pool2", "conv2d", "cross_entropy", "embedding", "group_norm",
    "linear", "mse_loss", "sigmoid", "silu", "upsample2",
    "finite_difference_oracle", "relative_error",
    "Conv2d", "Linear", "Module", "AdamW", "AdamWConfig",
]
