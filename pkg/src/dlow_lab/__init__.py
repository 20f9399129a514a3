"""Diverse sampling from a frozen CVAE via learnable affine latent flows."""

__version__ = "0.1.0"
