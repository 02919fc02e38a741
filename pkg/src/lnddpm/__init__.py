"""Mask-conditioned 3D diffusion for lymph-node CT patch synthesis."""

__version__ = "0.1.0"
