"""Cloth state estimation with a transition prior and mesh-constrained Gaussian splatting."""

__version__ = "0.1.0"
