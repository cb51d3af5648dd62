"""Dyadic listener-motion synthesis: quantized motion codebooks, cross-modal
speaker fusion, autoregressive prediction, baselines, and evaluation metrics.
"""

__version__ = "0.1.0"
