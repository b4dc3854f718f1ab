"""Latent diffusion speech synthesis and editing at desk scale."""

__version__ = "0.1.0"
