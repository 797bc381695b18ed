"""Mask-conditioned diffusion on brain phantoms with a persistence-diagram topology loss."""

__version__ = "0.1.0"
