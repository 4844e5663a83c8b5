"""Dual-branch (spatial + frequency) transformer depth estimation in NumPy."""

from .autograd import ComputationRecord, NonFiniteError, ShapeError, Tensor, backward, no_grad
from .config import TrainConfig
from .model import DepthEstimator

__version__ = "0.1.0"

__all__ = [
    "ComputationRecord",
    "DepthEstimator",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "backward",
    "no_grad",
]
