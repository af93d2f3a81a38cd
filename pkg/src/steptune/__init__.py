"""Step-wise differentiable-reward fine-tuning of toy diffusion models."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
