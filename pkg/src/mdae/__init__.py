"""Merged convolutional autoencoder for low-field to high-field MR slice reconstruction."""

__version__ = "0.1.0"

from .model import MergedAutoencoder
from .nn import ModelSpec

__all__ = ["MergedAutoencoder", "ModelSpec", "__version__"]
