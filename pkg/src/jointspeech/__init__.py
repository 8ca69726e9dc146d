"""Joint speech-text pre-training at desk scale, on a small numpy autodiff engine."""

from .config import Config, load_config
from .encoder import Model, ModelConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["Config", "Model", "ModelConfig", "load_checkpoint", "load_config", "save_checkpoint"]
