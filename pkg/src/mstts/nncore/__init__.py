"""Minimal deterministic tensor / layer / optimizer core with verified gradients."""

from .tensor import ShapeError, Tensor, concat, no_grad
from .layers import (
    ConfigError,
    Conv1d,
    Embedding,
    LayerNorm,
    Linear,
    MaskedRowError,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    Parameter,
    TransformerBlock,
    UndefinedLossError,
    conv1d,
    conv1d_output_length,
    cross_entropy,
    linear,
    scaled_dot_attention,
    sinusoidal_positions,
)
from .optim import AdamState, GradientError, adam_step, warmup_inverse_sqrt_lr
from .gradcheck import check_gradients, max_relative_error, numerical_gradient

__all__ = [
    "AdamState",
    "ConfigError",
    "Conv1d",
    "Embedding",
    "GradientError",
    "LayerNorm",
    "Linear",
    "MaskedRowError",
    "Module",
    "ModuleList",
    "MultiHeadSelfAttention",
    "Parameter",
    "ShapeError",
    "Tensor",
    "TransformerBlock",
    "UndefinedLossError",
    "adam_step",
    "check_gradients",
    "concat",
    "conv1d",
    "conv1d_output_length",
    "cross_entropy",
    "linear",
    "max_relative_error",
    "no_grad",
    "numerical_gradient",
    "scaled_dot_attention",
    "sinusoidal_positions",
    "warmup_inverse_sqrt_lr",
]
