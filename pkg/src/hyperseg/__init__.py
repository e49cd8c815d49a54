"""Segmentation-style hyperspectral image classification toolkit."""

__version__ = "0.1.0"

from .tensor import Tensor, Param, backward, no_grad  # noqa: F401
