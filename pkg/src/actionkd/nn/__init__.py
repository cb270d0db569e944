"""Minimal differentiable-computation substrate (float64, CPU)."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .functional import (
    affine,
    causal_mask,
    cross_entropy,
    dropout,
    embedding,
    gather_last,
    kl_divergence,
    layer_norm,
    log_softmax,
    mse,
    padding_mask,
    sdp_attention,
    softmax_temp,
    weighted_cross_entropy,
)
from .gradcheck import GradCheckError, grad_check
from .optim import AdamW
from .tensor import Tensor, ensure_tensor, parameter

__all__ = [
    "AdamW",
    "Checkpoint",
    "GradCheckError",
    "Tensor",
    "affine",
    "causal_mask",
    "cross_entropy",
    "dropout",
    "embedding",
    "ensure_tensor",
    "gather_last",
    "grad_check",
    "kl_divergence",
    "layer_norm",
    "load_checkpoint",
    "log_softmax",
    "mse",
    "padding_mask",
    "parameter",
    "save_checkpoint",
    "sdp_attention",
    "softmax_temp",
    "weighted_cross_entropy",
]
