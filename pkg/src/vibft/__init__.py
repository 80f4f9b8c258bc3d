"""Variational information bottleneck fine-tuning at desk scale."""

__version__ = "0.1.0"
