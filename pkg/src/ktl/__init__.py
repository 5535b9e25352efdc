"""Unsupervised landmark discovery on synthetic deformable objects."""

__version__ = "0.1.0"
