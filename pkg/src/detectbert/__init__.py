"""Correlated multiple-instance-learning head for app-level malware scoring.

Variable-size bags of precomputed instance embeddings are pooled through a
learnable category vector and Nystrom-attention blocks into one app-level
score, with aggregation baselines, a training/evaluation harness, and
independent verification oracles.
"""

__version__ = "0.1.0"

from .model import Bag, ModelConfig, ModelParams, forward, init_params, predict
from .numerics import Tensor

__all__ = [
    "Bag",
    "ModelConfig",
    "ModelParams",
    "Tensor",
    "forward",
    "init_params",
    "predict",
]
