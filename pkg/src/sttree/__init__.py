"""Shifted-window encoder + prototype-routed neural decision tree for
multivariate time-series classification."""

from .kernels import BACKEND
from .model import ModelConfig, ModelOutput, STTreeModel
from .encoder import EncoderConfig
from .tensor import Tensor, backward, no_grad

__all__ = [
    "BACKEND",
    "EncoderConfig",
    "ModelConfig",
    "ModelOutput",
    "STTreeModel",
    "Tensor",
    "backward",
    "no_grad",
]
__version__ = "0.1.0"
