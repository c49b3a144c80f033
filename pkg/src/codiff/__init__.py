"""Contrastive-diffusion Bayesian optimal experimental design."""

__version__ = "0.1.0"
