"""Minimal differentiable-network engine with explicit backpropagation."""
from .layers import (
    Conv2d,
    Dense,
    Flatten,
    Layer,
    LeakyRelu,
    Reshape,
    Sigmoid,
    Tanh,
    TransposedConv2d,
    layer_from_dict,
)
from .model import (
    ForwardCache,
    LrSchedule,
    ModelBundle,
    NonFiniteGradientError,
    StaleCacheError,
    adam_step,
    backward,
    build_model,
    forward,
    gradient_check,
    load_model,
    lr_at,
    predict,
    save_model,
)

__all__ = [
    "Conv2d", "Dense", "Flatten", "Layer", "LeakyRelu", "Reshape", "Sigmoid", "Tanh", "TransposedConv2d",
    "layer_from_dict", "ForwardCache", "LrSchedule", "ModelBundle", "NonFiniteGradientError", "StaleCacheError",
    "adam_step", "backward", "build_model", "forward", "gradient_check", "load_model", "lr_at", "predict",
    "save_model",
]
