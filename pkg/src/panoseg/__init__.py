"""Panoramic semantic segmentation toolbox: dual-view fusion, moving
window attention blocks, spherical convolution, and instance-guided
refinement, built on a small verifiable tensor engine."""

from .tensor import Tensor, grad_check

__all__ = ["Tensor", "grad_check"]
__version__ = "0.1.0"
