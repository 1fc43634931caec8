"""Streaming open-world classification benchmark.

Feeds a heavy-tailed class sequence one sample at a time to a learner,
records predict-then-label evaluations, meters multiply-accumulates, and
scores the run with accuracy, cross-sectional and unseen-class metrics.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
