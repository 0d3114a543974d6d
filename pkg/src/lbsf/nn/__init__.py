"""Minimal differentiable numeric core."""

from . import backend
from . import functional
from .gradcheck import finite_diff_check
from .layers import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerEncoder,
    TransformerEncoderLayer,
    TransformerLayerConfig,
)
from .tensor import NumericError, Parameter, Tensor, check_mode, default_dtype, no_grad, precision

__all__ = [
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "NumericError",
    "Parameter",
    "Tensor",
    "TransformerEncoder",
    "TransformerEncoderLayer",
    "TransformerLayerConfig",
    "backend",
    "check_mode",
    "default_dtype",
    "finite_diff_check",
    "functional",
    "no_grad",
    "precision",
]
