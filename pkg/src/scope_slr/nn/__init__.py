"""Small float64 reverse-mode autodiff core and the layers the encoders use."""

from .gradcheck import grad_check
from .layers import (
    AttentionLayer,
    EncoderBlock,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    TemporalConv,
    TransformerEncoder,
    attention_forward,
    cross_entropy,
    l2_loss,
    mean_pool_time,
    temporal_conv,
)
from .optim import AdamW, OptimizerState, adamw_step, cosine_lr
from .tensor import Tensor, parameter

__all__ = [
    "AdamW", "AttentionLayer", "EncoderBlock", "FeedForward", "LayerNorm", "Linear",
    "Module", "OptimizerState", "TemporalConv", "Tensor", "TransformerEncoder",
    "adamw_step", "attention_forward", "cosine_lr", "cross_entropy", "grad_check",
    "l2_loss", "mean_pool_time", "parameter", "temporal_conv",
]
