"""Desk-scale latent-diffusion pipeline for monocular metric depth estimation."""

__version__ = "0.1.0"
