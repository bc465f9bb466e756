"""Toy latent-diffusion lab for background-disentangled defect generation."""

__version__ = "0.1.0"
