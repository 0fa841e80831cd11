"""Audio captioning with a keyword-estimation branch feeding the decoder memory."""

from .config import ModelConfig, TrainConfig
from .model import CaptionModel

__all__ = ["ModelConfig", "TrainConfig", "CaptionModel"]
__version__ = "0.1.0"
