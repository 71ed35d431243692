"""Dual-branch weakly supervised 3D segmentation from partial instance annotations."""

__version__ = "0.1.0"
