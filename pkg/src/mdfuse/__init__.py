"""Degradation-aware infrared/visible image fusion at desk scale."""

from .fusenet import FuseNet, FuseNetConfig
from .imageio import ImageBuffer, read_image, write_image
from .prior import MockProvider, PriorProviderConfig, ServiceProvider
from .tensor import Tape, Tensor, backward, grad_check, precision
from .train import TrainConfig, train

__all__ = [
    "FuseNet",
    "FuseNetConfig",
    "ImageBuffer",
    "MockProvider",
    "PriorProviderConfig",
    "ServiceProvider",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "grad_check",
    "precision",
    "read_image",
    "train",
    "write_image",
]
