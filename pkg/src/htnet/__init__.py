"""Micro-expression recognition with a block-local hierarchical transformer."""

from .model import HTNet, ModelConfig
from .training import TrainConfig

__all__ = ["HTNet", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
