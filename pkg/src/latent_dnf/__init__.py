"""Discrete normalising flows built from latent XOR transformations.

A data vector x is mapped to y = x xor u^(1) xor .. xor u^(L), where each
u^(l) is drawn from an autoregressive MADE conditioner. Training uses
score-function gradient estimators against a variational posterior (or the
prior itself), and small instances can be checked exactly by enumeration.
"""

from .flow import BaseParams, TransformSequence, apply_stack, base_log_prob, xor_transform
from .model import LatentFlow
from .estimators import EstimatorConfig, estimate_gradients
from .config import RunConfig

__all__ = ["BaseParams", "TransformSequence", "apply_stack", "base_log_prob",
           "xor_transform", "LatentFlow", "EstimatorConfig", "estimate_gradients",
           "RunConfig"]
__version__ = "0.1.0"
