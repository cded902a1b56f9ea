"""Sparse mixture-of-experts vision transformers on a small numpy autograd core."""

from .tensor import Tensor, gradient_check, no_grad

__all__ = ["Tensor", "gradient_check", "no_grad"]
__version__ = "0.1.0"
