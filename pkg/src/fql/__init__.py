"""Batch-constrained actor-critic (FQL) with a contrastive VAE, plus an exact tabular lab."""

__version__ = "0.1.0"
