"""Noise-robust learning on multi-frame embeddings.

Channel-truncated noise detection, two-component GMM clean/noisy splitting,
and noise-contrastive regularization, with a synthetic benchmark generator
and an iterative train/detect loop.
"""

from . import contrastive, datagen, gmm, metrics, model, truncation

__all__ = ["contrastive", "datagen", "gmm", "metrics", "model", "truncation"]
__version__ = "0.1.0"
