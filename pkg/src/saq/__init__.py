"""Sampling-aware quantization of diffusion-model noise predictors, at toy scale."""

__version__ = "0.1.0"
