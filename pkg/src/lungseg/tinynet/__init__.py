"""From-scratch U-net / residual U-net in NumPy."""

from .io import WeightsFormatError, load_weights, save_weights
from .layers import softmax_cross_entropy
from .net import (
    NetConfig,
    ShapeMismatchError,
    StaleCacheError,
    TensorStore,
    backward,
    forward,
    infer_config,
    init_store,
    param_shapes,
    predict,
)
from .optim import sgd_momentum_step, step_decay_lr

loss_softmax_ce = softmax_cross_entropy

__all__ = [
    "NetConfig",
    "ShapeMismatchError",
    "StaleCacheError",
    "TensorStore",
    "WeightsFormatError",
    "backward",
    "forward",
    "infer_config",
    "init_store",
    "load_weights",
    "loss_softmax_ce",
    "param_shapes",
    "predict",
    "save_weights",
    "sgd_momentum_step",
    "softmax_cross_entropy",
    "step_decay_lr",
]
