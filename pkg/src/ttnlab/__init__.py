"""Test-time normalization laboratory: interpolated batch-norm statistics,
their post-training, and a domain-shift evaluation harness."""

__version__ = "0.1.0"
