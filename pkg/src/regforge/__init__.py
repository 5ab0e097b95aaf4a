"""Weakly supervised 2D multimodal registration with affine and thin-plate-spline networks."""
__version__ = "0.1.0"
